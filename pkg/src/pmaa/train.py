"""L1 optimization with decoupled-weight-decay Adam and cosine learning-rate
decay, plus the epoch loop with best-SSIM checkpointing."""

import math
from dataclasses import dataclass, field

import numpy as np

import pmaa.functional as F
from pmaa import checkpoint as ckpt_io
from pmaa import metrics
from pmaa.model import Parameter, PmaaModel
from pmaa.tensor import Tensor, backward

__all__ = ["l1_loss", "cosine_lr", "AdamW", "TrainConfig", "EpochLog",
           "TrainDiverged", "train_loop", "batch_tensors"]


class TrainDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over every element, as a scalar tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return F.scale(F.sum_all(F.absolute(F.sub(pred, target))), 1.0 / pred.numel)


def cosine_lr(step: int, total_steps: int, lr0: float = 5e-4, lr_min: float = 0.0) -> float:
    """Cosine decay from lr0 to lr_min over total_steps, no warmup or restarts."""
    if total_steps < 1:
        raise ValueError(f"cosine_lr: total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Decay skips learnable scalars and normalization affine parameters (their
    ``decay`` flag is False).  A parameter with no gradient is treated as
    having a zero gradient.
    """

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if p.decay and self.weight_decay:
                update = update + lr * self.weight_decay * p.data
            p.data = p.data - update

    def moment_records(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"{ckpt_io.MOMENT_PREFIX}m/{p.name}"] = self.m[p.name]
            out[f"{ckpt_io.MOMENT_PREFIX}v/{p.name}"] = self.v[p.name]
        return out

    def restore_moments(self, records: dict[str, np.ndarray], step: int) -> None:
        self.step_count = step
        for p in self.params:
            self.m[p.name] = records[f"{ckpt_io.MOMENT_PREFIX}m/{p.name}"].copy()
            self.v[p.name] = records[f"{ckpt_io.MOMENT_PREFIX}v/{p.name}"].copy()


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    lr0: float = 5e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-5
    checkpoint_path: str | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochLog:
    epoch: int
    train_l1: float
    val_psnr: float
    val_ssim: float
    lr: float

    def to_line(self) -> str:
        psnr_txt = "inf" if math.isinf(self.val_psnr) else f"{self.val_psnr:.6f}"
        return (f"{self.epoch}\t{self.train_l1:.8f}\t{psnr_txt}\t"
                f"{self.val_ssim:.8f}\t{self.lr:.10e}")


@dataclass
class TrainResult:
    logs: list[EpochLog] = field(default_factory=list)
    best_ssim: float = float("-inf")
    best_epoch: int = -1


def batch_tensors(samples, indices) -> tuple[list[Tensor], Tensor]:
    """Stack per-sample (1, c, h, w) tensors into one batch along n."""
    xs = [
        Tensor(np.concatenate([samples[i].cloudy[k].data for i in indices]))
        for k in range(3)
    ]
    target = Tensor(np.concatenate([samples[i].target.data for i in indices]))
    return xs, target


def train_loop(model: PmaaModel, train_set, val_set, tcfg: TrainConfig,
               log_fn=None) -> TrainResult:
    """Shuffled minibatch epochs; checkpoint whenever validation SSIM improves.

    The batch order comes from one seeded generator, so a fixed seed gives
    identical epoch logs across runs.
    """
    tcfg.validate()
    if not train_set:
        raise ValueError("train_loop: empty training set")
    if not val_set:
        raise ValueError("train_loop: empty validation set")

    optim = AdamW(model.params.parameters(), weight_decay=tcfg.weight_decay)
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])
    n = len(train_set)
    batches_per_epoch = (n + tcfg.batch_size - 1) // tcfg.batch_size
    total_steps = tcfg.epochs * batches_per_epoch

    result = TrainResult()
    step = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        lr = tcfg.lr0
        for b in range(batches_per_epoch):
            indices = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            xs, target = batch_tensors(train_set, indices)
            pred, _ = model(*xs)
            loss = l1_loss(pred, target)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainDiverged(
                    f"non-finite loss {loss_value} at epoch {epoch}, batch {b}")
            optim.zero_grad()
            backward(loss)
            lr = cosine_lr(step, total_steps, tcfg.lr0, tcfg.lr_min)
            optim.step(lr)
            step += 1
            epoch_losses.append(loss_value)

        report = metrics.evaluate_dataset(model, val_set)
        log = EpochLog(epoch, sum(epoch_losses) / len(epoch_losses),
                       report.mean_psnr, report.mean_ssim, lr)
        result.logs.append(log)
        if log_fn is not None:
            log_fn(log)

        if report.mean_ssim > result.best_ssim:
            result.best_ssim = report.mean_ssim
            result.best_epoch = epoch
            if tcfg.checkpoint_path is not None:
                records = {name: p.data for name, p in model.params.named_parameters()}
                records.update(optim.moment_records())
                ckpt_io.save_checkpoint(
                    tcfg.checkpoint_path, model.config, records,
                    epoch=epoch, best_ssim=report.mean_ssim, step=optim.step_count)
    return result
