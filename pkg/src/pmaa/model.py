"""The cloud-removal network: shared bottleneck, per-stage encoder, multi-scale
attention, gated decoder, and the progressive multi-stage wrapper.

Three cloudy frames of the same scene pass through one weight-shared residual
bottleneck, are concatenated on channels, and feed a chain of identical
(but independently parameterized) autoencoder stages; each stage consumes the
previous stage's prediction next to a 1x1-adapted copy of the shared features
and emits a refined prediction through a tanh head.
"""

import math
from dataclasses import dataclass, field

import numpy as np

import pmaa.functional as F
from pmaa.tensor import Tensor

__all__ = [
    "ModelConfig",
    "Parameter",
    "PmaaParams",
    "PmaaModel",
    "bottleneck_forward",
    "encoder_forward",
    "multi_scale_fusion",
    "transformer_layer",
    "selective_attention",
    "lim_step",
    "mam_forward",
    "decoder_forward",
    "head_forward",
    "autoencoder_forward",
    "pmaa_forward",
]

BOTTLENECK_CHANNELS = 16

FUSION_MODES = ("sum", "concat", "none")
ATTENTION_MODES = ("nonpatch", "patch", "off")


@dataclass
class ModelConfig:
    """Architectural hyperparameters, ablation toggles included."""

    in_channels: int = 4          # spectral channels per image (RGB + IR)
    num_images: int = 3           # temporal frames per sample
    hidden_channels: int = 32
    downsamples: int = 4
    attention_kernel: int = 11    # depthwise kernel of the modulation blocks
    lim_kernel: int = 11          # depthwise kernel of the decoder gates
    ffn_expansion: float = 2.0
    stages: int = 3
    fusion_mode: str = "sum"
    attention_mode: str = "nonpatch"
    selective_attention: bool = True
    lim: bool = True
    patch_size: int = 4
    height: int = 256
    width: int = 256

    def __post_init__(self):
        self.validate()

    @property
    def stage_in_channels(self) -> int:
        return self.num_images * self.in_channels

    @property
    def ffn_channels(self) -> int:
        return int(round(self.ffn_expansion * self.hidden_channels))

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.downsamples < 1:
            raise ValueError(f"downsamples must be >= 1, got {self.downsamples}")
        if self.hidden_channels < 1:
            raise ValueError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.attention_kernel % 2 == 0 or self.attention_kernel < 1:
            raise ValueError(f"attention_kernel must be odd, got {self.attention_kernel}")
        if self.lim_kernel % 2 == 0 or self.lim_kernel < 1:
            raise ValueError(f"lim_kernel must be odd, got {self.lim_kernel}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(
                f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        scale = 2 ** self.downsamples
        if self.height % scale != 0 or self.width % scale != 0:
            raise ValueError(
                f"input size {self.height}x{self.width} not divisible by 2^{self.downsamples}")
        ffn = self.ffn_expansion * self.hidden_channels
        if abs(ffn - round(ffn)) > 1e-9 or round(ffn) < 1:
            raise ValueError(
                f"ffn_expansion {self.ffn_expansion} * hidden_channels {self.hidden_channels} "
                "must be a positive integer")
        if self.attention_mode == "patch":
            ch, cw = self.height // scale, self.width // scale
            if self.patch_size < 1 or ch % self.patch_size != 0 or cw % self.patch_size != 0:
                raise ValueError(
                    f"patch_size {self.patch_size} does not divide the coarsest map {ch}x{cw}")

    _KV_FIELDS = (
        "in_channels", "num_images", "hidden_channels", "downsamples",
        "attention_kernel", "lim_kernel", "ffn_expansion", "stages",
        "fusion_mode", "attention_mode", "selective_attention", "lim",
        "patch_size", "height", "width",
    )

    def to_kv(self) -> dict[str, str]:
        out = {}
        for name in self._KV_FIELDS:
            v = getattr(self, name)
            out[name] = str(v).lower() if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def field_type(cls, name: str) -> type:
        kind = cls.__dataclass_fields__[name].type
        if isinstance(kind, str):
            kind = {"int": int, "float": float, "bool": bool, "str": str}[kind]
        return kind

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for name, raw in kv.items():
            if name not in cls._KV_FIELDS:
                raise ValueError(f"unknown model config key {name!r}")
            kind = cls.field_type(name)
            if kind is bool:
                if raw not in ("true", "false", "on", "off", "1", "0"):
                    raise ValueError(f"config key {name!r}: expected a boolean, got {raw!r}")
                kwargs[name] = raw in ("true", "on", "1")
            elif kind is int:
                kwargs[name] = int(raw)
            elif kind is float:
                kwargs[name] = float(raw)
            else:
                kwargs[name] = raw
        return cls(**kwargs)


class Parameter(Tensor):
    """Leaf tensor with a registry name and a weight-decay flag."""

    __slots__ = ("name", "decay")

    def __init__(self, data, name: str, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay = decay


@dataclass
class ConvP:
    weight: Parameter
    bias: Parameter
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


@dataclass
class NormP:
    gamma: Parameter
    beta: Parameter

    def __call__(self, x: Tensor) -> Tensor:
        return F.instance_norm2d(x, self.gamma, self.beta)


@dataclass
class BottleneckP:
    conv1: ConvP
    norm: NormP
    conv2: ConvP


@dataclass
class EncoderBlockP:
    dw: ConvP
    pw: ConvP
    norm: NormP


@dataclass
class EncoderP:
    stem: ConvP
    stem_norm: NormP
    blocks: list[EncoderBlockP]


@dataclass
class AttentionP:
    w1: ConvP
    w2: ConvP
    w3: ConvP
    alpha: Parameter
    v1: ConvP
    v2: ConvP
    ffn_norm: NormP
    beta: Parameter
    dconv: ConvP | None = None        # nonpatch mode
    ffn_dconv: ConvP | None = None
    attn_q: ConvP | None = None       # patch mode
    attn_k: ConvP | None = None
    attn_v: ConvP | None = None
    ffn_q: ConvP | None = None
    ffn_k: ConvP | None = None
    ffn_v: ConvP | None = None


@dataclass
class SelectiveP:
    z1: ConvP
    z2: ConvP
    z3: ConvP


@dataclass
class LimP:
    d1: ConvP
    d2: ConvP
    d3: ConvP
    norm2: NormP
    norm3: NormP


@dataclass
class StageP:
    adapter: ConvP
    encoder: EncoderP
    head: ConvP
    fuse: ConvP | None = None                 # concat fusion only
    attn: AttentionP | None = None            # attention_mode != off
    select: list[SelectiveP] = field(default_factory=list)
    lim_steps: list[LimP] = field(default_factory=list)
    up_steps: list[ConvP] = field(default_factory=list)  # lim toggle off


def _init_rng(seed: int, name: str) -> np.random.Generator:
    # Stream derived from (seed, name): adding or removing other parameters
    # never shifts this tensor's initialization.
    return np.random.default_rng([seed, *name.encode("utf-8")])


class PmaaParams:
    """The full learnable-parameter tree plus a flat name -> Parameter registry."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.registry: dict[str, Parameter] = {}

        ci = config.in_channels
        c = config.hidden_channels
        n_imgs = config.num_images
        k_attn = config.attention_kernel
        k_lim = config.lim_kernel
        nd = config.downsamples

        self.bottleneck = BottleneckP(
            conv1=self._conv("bottleneck.conv1", ci, BOTTLENECK_CHANNELS, 3, padding=1),
            norm=self._norm("bottleneck.norm", BOTTLENECK_CHANNELS),
            conv2=self._conv("bottleneck.conv2", BOTTLENECK_CHANNELS, ci, 3, padding=1),
        )

        self.stages: list[StageP] = []
        for t in range(config.stages):
            p = f"stage{t}"
            stage = StageP(
                adapter=self._conv(f"{p}.adapter", n_imgs * ci, n_imgs * ci - ci, 1),
                encoder=EncoderP(
                    stem=self._conv(f"{p}.encoder.stem", n_imgs * ci, c, 3, padding=1),
                    stem_norm=self._norm(f"{p}.encoder.stem_norm", c),
                    blocks=[
                        EncoderBlockP(
                            dw=self._conv(f"{p}.encoder.block{i}.dw", c, c, 3,
                                          stride=2, padding=1, groups=c),
                            pw=self._conv(f"{p}.encoder.block{i}.pw", c, c, 1),
                            norm=self._norm(f"{p}.encoder.block{i}.norm", c),
                        )
                        for i in range(1, nd + 1)
                    ],
                ),
                head=self._conv(f"{p}.head", c, ci, 3, padding=1),
            )
            if config.fusion_mode == "concat":
                stage.fuse = self._conv(f"{p}.mam.fuse", (nd + 1) * c, c, 1)
            if config.attention_mode != "off":
                stage.attn = self._build_attention(f"{p}.mam.attn", c, k_attn)
            if config.selective_attention:
                stage.select = [
                    SelectiveP(
                        z1=self._conv(f"{p}.mam.select{i}.z1", c, c, 1),
                        z2=self._conv(f"{p}.mam.select{i}.z2", c, c, 1),
                        z3=self._conv(f"{p}.mam.select{i}.z3", c, c, 1),
                    )
                    for i in range(nd + 1)
                ]
            if config.lim:
                stage.lim_steps = [
                    LimP(
                        d1=self._conv(f"{p}.decoder.step{j}.d1", c, c, k_lim,
                                      padding=(k_lim - 1) // 2, groups=c),
                        d2=self._conv(f"{p}.decoder.step{j}.d2", c, c, k_lim,
                                      padding=(k_lim - 1) // 2, groups=c),
                        d3=self._conv(f"{p}.decoder.step{j}.d3", c, c, k_lim,
                                      padding=(k_lim - 1) // 2, groups=c),
                        norm2=self._norm(f"{p}.decoder.step{j}.norm2", c),
                        norm3=self._norm(f"{p}.decoder.step{j}.norm3", c),
                    )
                    for j in range(1, nd + 1)
                ]
            else:
                stage.up_steps = [
                    self._conv(f"{p}.decoder.step{j}.fuse", 2 * c, c, 1)
                    for j in range(1, nd + 1)
                ]
            self.stages.append(stage)

    def _build_attention(self, prefix: str, c: int, k: int) -> AttentionP:
        cfg = self.config
        rc = cfg.ffn_channels
        attn = AttentionP(
            w1=self._conv(f"{prefix}.w1", c, c, 1),
            w2=self._conv(f"{prefix}.w2", c, c, 1),
            w3=self._conv(f"{prefix}.w3", c, c, 1),
            alpha=self._scalar(f"{prefix}.alpha"),
            v1=self._conv(f"{prefix}.v1", c, rc, 1),
            v2=self._conv(f"{prefix}.v2", rc, c, 1),
            ffn_norm=self._norm(f"{prefix}.ffn_norm", c),
            beta=self._scalar(f"{prefix}.beta"),
        )
        if cfg.attention_mode == "nonpatch":
            attn.dconv = self._conv(f"{prefix}.dconv", c, c, k,
                                    padding=(k - 1) // 2, groups=c)
            attn.ffn_dconv = self._conv(f"{prefix}.ffn_dconv", rc, rc, k,
                                        padding=(k - 1) // 2, groups=rc)
        else:
            attn.attn_q = self._conv(f"{prefix}.attn_q", c, c, 1)
            attn.attn_k = self._conv(f"{prefix}.attn_k", c, c, 1)
            attn.attn_v = self._conv(f"{prefix}.attn_v", c, c, 1)
            attn.ffn_q = self._conv(f"{prefix}.ffn_q", rc, rc, 1)
            attn.ffn_k = self._conv(f"{prefix}.ffn_k", rc, rc, 1)
            attn.ffn_v = self._conv(f"{prefix}.ffn_v", rc, rc, 1)
        return attn

    def _register(self, param: Parameter) -> Parameter:
        if param.name in self.registry:
            raise ValueError(f"parameter {param.name!r} registered twice")
        self.registry[param.name] = param
        return param

    def _conv(self, name: str, ci: int, co: int, k: int,
              stride: int = 1, padding: int = 0, groups: int = 1) -> ConvP:
        rng = _init_rng(self.seed, name)
        fan_in = (ci // groups) * k * k
        bound = 1.0 / math.sqrt(fan_in)
        w = self._register(Parameter(
            rng.uniform(-bound, bound, (co, ci // groups, k, k)), f"{name}.weight"))
        b = self._register(Parameter(
            rng.uniform(-bound, bound, (1, co, 1, 1)), f"{name}.bias"))
        return ConvP(w, b, (stride, stride), (padding, padding), groups)

    def _norm(self, name: str, c: int) -> NormP:
        gamma = self._register(Parameter(np.ones((1, c, 1, 1)), f"{name}.gamma", decay=False))
        beta = self._register(Parameter(np.zeros((1, c, 1, 1)), f"{name}.beta", decay=False))
        return NormP(gamma, beta)

    def _scalar(self, name: str) -> Parameter:
        return self._register(Parameter(np.ones((1, 1, 1, 1)), name, decay=False))

    def named_parameters(self):
        return self.registry.items()

    def parameters(self) -> list[Parameter]:
        return list(self.registry.values())

    def zero_grad(self) -> None:
        for p in self.registry.values():
            p.zero_grad()

    def total_count(self) -> int:
        return sum(p.numel for p in self.registry.values())


def bottleneck_forward(x: Tensor, params: BottleneckP) -> Tensor:
    """Residual pre-network shared across the temporal frames."""
    h = F.relu(params.norm(params.conv1(x)))
    return F.add(x, params.conv2(h))


def encoder_forward(x: Tensor, enc: EncoderP) -> list[Tensor]:
    """Stem plus strided depthwise-separable blocks; returns all N+1 scales."""
    f = F.relu(enc.stem_norm(enc.stem(x)))
    feats = [f]
    for blk in enc.blocks:
        f = F.relu(blk.norm(blk.pw(blk.dw(f))))
        feats.append(f)
    return feats


def multi_scale_fusion(feats: list[Tensor], mode: str, fuse: ConvP | None = None) -> Tensor:
    """Pool every scale to the coarsest resolution and combine."""
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == "none":
        return feats[-1]
    coarse_hw = feats[-1].shape[2:]
    pooled = [
        f if f.shape[2:] == coarse_hw else F.adaptive_avg_pool2d(f, coarse_hw)
        for f in feats
    ]
    if mode == "sum":
        acc = pooled[0]
        for f in pooled[1:]:
            acc = F.add(acc, f)
        return acc
    return fuse(F.concat_channels(pooled))


def _context(attn: AttentionP, x: Tensor, site: str, patch_size: int) -> Tensor:
    """Spatial-context operator: large-kernel depthwise conv, or per-patch
    self-attention in the patch ablation."""
    if attn.dconv is not None:
        conv = attn.dconv if site == "attn" else attn.ffn_dconv
        return conv(x)
    q, k, v = ((attn.attn_q, attn.attn_k, attn.attn_v) if site == "attn"
               else (attn.ffn_q, attn.ffn_k, attn.ffn_v))
    return F.patch_attention(q(x), k(x), v(x), patch_size)


def transformer_layer(f_ms: Tensor, attn: AttentionP, config: ModelConfig) -> Tensor:
    """Convolutional-modulation attention followed by a feed-forward block,
    each as a residual branch scaled by a learnable scalar."""
    gate = F.mul(_context(attn, attn.w1(f_ms), "attn", config.patch_size), attn.w2(f_ms))
    f_a = F.add(f_ms, F.scalar_scale(attn.w3(gate), attn.alpha))

    hidden = attn.v1(f_a)
    ffn = F.add(hidden, _context(attn, hidden, "ffn", config.patch_size))
    branch = attn.ffn_norm(attn.v2(ffn))
    return F.add(f_a, F.scalar_scale(branch, attn.beta))


def selective_attention(f_g: Tensor, f_i: Tensor, sel: SelectiveP, factor: int) -> Tensor:
    """Gate a skip feature by the sigmoid of the upsampled global feature and
    add an upsampled affine shift."""
    gate = F.upsample_nearest(F.sigmoid(sel.z1(f_g)), factor)
    shift = F.upsample_nearest(sel.z3(f_g), factor)
    return F.add(F.mul(gate, sel.z2(f_i)), shift)


def mam_forward(feats: list[Tensor], stage: StageP, config: ModelConfig) -> list[Tensor]:
    """Fusion, transformer layer, and per-scale selective attention."""
    f_ms = multi_scale_fusion(feats, config.fusion_mode, stage.fuse)
    f_g = transformer_layer(f_ms, stage.attn, config) if stage.attn is not None else f_ms
    if not config.selective_attention:
        return feats
    n = config.downsamples
    return [
        selective_attention(f_g, feats[i], stage.select[i], 2 ** (n - i))
        for i in range(n + 1)
    ]


def lim_step(o_prev: Tensor, f_skip: Tensor, lim: LimP) -> Tensor:
    """One decoder step: upsampled sigmoid gate on the finer skip feature plus
    an upsampled modulated global path."""
    if (2 * o_prev.shape[2], 2 * o_prev.shape[3]) != f_skip.shape[2:]:
        raise ValueError(
            f"lim_step: skip {f_skip.shape[2:]} is not twice the coarse {o_prev.shape[2:]}")
    gate = F.upsample_nearest(F.sigmoid(lim.d1(o_prev)), 2)
    local = lim.norm2(lim.d2(f_skip))
    glob = F.upsample_nearest(lim.norm3(lim.d3(o_prev)), 2)
    return F.add(F.mul(gate, local), glob)


def _plain_up_step(o_prev: Tensor, f_skip: Tensor, fuse: ConvP) -> Tensor:
    return fuse(F.concat_channels([F.upsample_nearest(o_prev, 2), f_skip]))


def decoder_forward(f_sel: list[Tensor], stage: StageP, config: ModelConfig) -> Tensor:
    n = config.downsamples
    o = f_sel[n]
    for j in range(1, n + 1):
        skip = f_sel[n - j]
        if config.lim:
            o = lim_step(o, skip, stage.lim_steps[j - 1])
        else:
            o = _plain_up_step(o, skip, stage.up_steps[j - 1])
    return o


def head_forward(o: Tensor, stage: StageP) -> Tensor:
    return F.tanh(stage.head(o))


def autoencoder_forward(x: Tensor, stage: StageP, config: ModelConfig) -> Tensor:
    """One full stage: encoder -> MAM -> decoder -> tanh head, [-1, 1] output."""
    feats = encoder_forward(x, stage.encoder)
    f_sel = mam_forward(feats, stage, config)
    o = decoder_forward(f_sel, stage, config)
    return head_forward(o, stage)


def pmaa_forward(x1: Tensor, x2: Tensor, x3: Tensor, params: PmaaParams,
                 config: ModelConfig) -> tuple[Tensor, list[Tensor]]:
    """Progressive refinement over all stages.

    Returns the final prediction and every intermediate stage output.
    """
    for name, x in (("x1", x1), ("x2", x2), ("x3", x3)):
        if x.shape != x1.shape:
            raise ValueError(f"pmaa_forward: {name} shape {x.shape} != {x1.shape}")
        if x.shape[1] != config.in_channels:
            raise ValueError(
                f"pmaa_forward: {name} has {x.shape[1]} channels, expected {config.in_channels}")
    n, _, h, w = x1.shape
    scale = 2 ** config.downsamples
    if h % scale != 0 or w % scale != 0:
        raise ValueError(f"pmaa_forward: input {h}x{w} not divisible by 2^{config.downsamples}")

    us = [bottleneck_forward(x, params.bottleneck) for x in (x1, x2, x3)]
    u_c = F.concat_channels(us)

    q = Tensor.zeros((n, config.in_channels, h, w))
    outputs = []
    for stage in params.stages:
        stage_in = F.concat_channels([q, stage.adapter(u_c)])
        q = autoencoder_forward(stage_in, stage, config)
        outputs.append(q)
    return q, outputs


class PmaaModel:
    """Config plus parameters, callable on a triple of cloudy frames."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = PmaaParams(config, seed)

    def __call__(self, x1: Tensor, x2: Tensor, x3: Tensor) -> tuple[Tensor, list[Tensor]]:
        return pmaa_forward(x1, x2, x3, self.params, self.config)
