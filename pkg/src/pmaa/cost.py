"""Model cost accounting: exact parameter counts and analytic MAC counts.

MAC convention: one MAC per multiply inside a convolution kernel
(``kh * kw * (ci/groups) * co * h' * w' * n``), per element of a Hadamard
gating product, and per multiply inside the patch-attention score/apply
matmuls.  Elementwise activations, additions, normalization, pooling,
upsampling, and scalar scaling are free.  Counts are taken by executing the
real forward functions with a hook installed in :mod:`pmaa.functional`, so
the counter cannot drift from the architecture.
"""

import contextlib
from dataclasses import dataclass, field

import pmaa.functional as F
from pmaa import model as M
from pmaa.tensor import Tensor, no_grad

__all__ = ["CostReport", "count_params", "count_macs", "component_of",
           "REF_PARAMS", "REF_MACS", "COMPONENTS"]

# Published reference totals for the full 3-stage model at 256x256, used for
# side-by-side calibration reporting.
REF_PARAMS = 3_440_000
REF_MACS = 91_940_000_000

COMPONENTS = ("bottleneck", "adapter", "encoder", "mam", "decoder", "head")


def component_of(param_name: str) -> str:
    """Map a registry name to its reporting component."""
    if param_name.startswith("bottleneck."):
        return "bottleneck"
    part = param_name.split(".")[1]
    if part not in COMPONENTS:
        raise ValueError(f"cannot attribute parameter {param_name!r} to a component")
    return part


@dataclass
class CostReport:
    """Per-component and total parameter / MAC counts (exact integers)."""

    params: dict[str, int] = field(default_factory=dict)
    macs: dict[str, int] = field(default_factory=dict)
    resolution: tuple[int, int] | None = None

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    def merged(self, other: "CostReport") -> "CostReport":
        out = CostReport(dict(self.params), dict(self.macs), self.resolution or other.resolution)
        out.params.update(other.params)
        out.macs.update(other.macs)
        return out

    def to_text(self) -> str:
        lines = []
        if self.resolution is not None:
            lines.append(f"resolution\t{self.resolution[0]}x{self.resolution[1]}")
        for name in COMPONENTS:
            if name in self.params:
                lines.append(f"params.{name}\t{self.params[name]}")
        if self.params:
            lines.append(f"params.total\t{self.total_params}")
        for name in COMPONENTS:
            if name in self.macs:
                lines.append(f"macs.{name}\t{self.macs[name]}")
        if self.macs:
            lines.append(f"macs.total\t{self.total_macs}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned human-readable columns, with the published reference row."""
        rows = [("component", "params", "MACs")]
        for name in COMPONENTS:
            if name in self.params or name in self.macs:
                rows.append((name, f"{self.params.get(name, 0):,}", f"{self.macs.get(name, 0):,}"))
        rows.append(("total", f"{self.total_params:,}", f"{self.total_macs:,}"))
        rows.append(("total (M / G)", f"{self.total_params / 1e6:.4f} M",
                     f"{self.total_macs / 1e9:.4f} G"))
        rows.append(("reference", f"{REF_PARAMS / 1e6:.2f} M", f"{REF_MACS / 1e9:.2f} G"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
                 for row in rows]
        if self.resolution is not None:
            lines.insert(0, f"input resolution: {self.resolution[0]}x{self.resolution[1]}")
        return "\n".join(lines) + "\n"


def count_params(params: M.PmaaParams) -> CostReport:
    """Exact scalar count of every registered tensor, grouped by component."""
    report = CostReport(params={name: 0 for name in COMPONENTS})
    for name, p in params.named_parameters():
        report.params[component_of(name)] += p.numel
    return report


class _MacCounter:
    def __init__(self):
        self.total = 0

    def __call__(self, kind: str, count: int) -> None:
        self.total += count


@contextlib.contextmanager
def _capture():
    counter = _MacCounter()
    F.set_mac_hook(counter)
    try:
        yield counter
    finally:
        F.set_mac_hook(None)


def count_macs(config: M.ModelConfig, input_hw: tuple[int, int],
               params: M.PmaaParams | None = None) -> CostReport:
    """Analytic MAC count at batch size 1, per component.

    All stages are structurally identical, so one stage is traced and scaled
    by the stage count; the bottleneck runs once per temporal frame.
    """
    h, w = input_hw
    scale = 2 ** config.downsamples
    if h % scale != 0 or w % scale != 0:
        raise ValueError(f"count_macs: input {h}x{w} not divisible by 2^{config.downsamples}")
    if params is None:
        params = M.PmaaParams(config, seed=0)
    stage = params.stages[0]
    t = config.stages

    macs: dict[str, int] = {}
    with no_grad():
        frame = Tensor.zeros((1, config.in_channels, h, w))
        with _capture() as cap:
            M.bottleneck_forward(frame, params.bottleneck)
        macs["bottleneck"] = config.num_images * cap.total

        stage_in = Tensor.zeros((1, config.stage_in_channels, h, w))
        with _capture() as cap:
            stage.adapter(stage_in)
        macs["adapter"] = t * cap.total

        with _capture() as cap:
            feats = M.encoder_forward(stage_in, stage.encoder)
        macs["encoder"] = t * cap.total

        with _capture() as cap:
            f_sel = M.mam_forward(feats, stage, config)
        macs["mam"] = t * cap.total

        with _capture() as cap:
            top = M.decoder_forward(f_sel, stage, config)
        macs["decoder"] = t * cap.total

        with _capture() as cap:
            M.head_forward(top, stage)
        macs["head"] = t * cap.total

    return CostReport(macs=macs, resolution=(h, w))
