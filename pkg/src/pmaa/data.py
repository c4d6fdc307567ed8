"""Dataset representation, bit-exact tensor files, pixel normalization, and a
deterministic synthetic multi-temporal cloudy-image generator.

Tensor files ("PMAT") store one rank-4 float32 array little-endian; manifests
are tab-separated UTF-8 with one sample per line.  The generator derives every
random draw from a counter-based stream keyed by ``(seed, sample index)``, so
output directories are byte-identical across runs and platforms.
"""

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pmaa.tensor import Tensor

__all__ = [
    "TensorFileError",
    "read_tensor_file",
    "write_tensor_file",
    "normalize_pixels",
    "denormalize_pixels",
    "Sample",
    "ManifestEntry",
    "parse_manifest",
    "format_manifest",
    "load_dataset",
    "synth_generate",
    "CLOUD_ALBEDO",
    "JITTER_FRACTION",
]

TENSOR_MAGIC = b"PMAT"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sI4I")  # magic, version, n, c, h, w

CLOUD_ALBEDO = 0.95      # cloud value as a fraction of the pixel range
JITTER_FRACTION = 0.02   # per-image brightness jitter, fraction of pixel range
_SINUSOIDS = 8


class TensorFileError(ValueError):
    """Malformed tensor file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_tensor_file(path, tensor: Tensor) -> None:
    data = tensor.data
    if not np.all(np.isfinite(data)):
        raise ValueError(f"write_tensor_file: non-finite values in tensor for {path}")
    payload = data.astype("<f4").tobytes()
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, *data.shape)
    Path(path).write_bytes(header + payload)


def read_tensor_file(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFileError(f"{path}: truncated header", len(raw))
    magic, version, n, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != TENSOR_MAGIC:
        raise TensorFileError(f"{path}: bad magic {magic!r}", 0)
    if version != TENSOR_VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}", 4)
    expected = n * c * h * w * 4
    if len(raw) - _HEADER.size != expected:
        raise TensorFileError(
            f"{path}: payload holds {len(raw) - _HEADER.size} bytes, header promises {expected}",
            _HEADER.size)
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, c, h, w)
    return Tensor(values.astype(np.float64))


def normalize_pixels(raw: Tensor, pixel_max: float, source: str = "input") -> Tensor:
    """Map [0, pixel_max] to [-1, 1]; out-of-range values clamp with one warning."""
    if pixel_max <= 0:
        raise ValueError(f"normalize_pixels: pixel_max must be > 0, got {pixel_max}")
    data = raw.data
    bad = int(np.count_nonzero((data < 0) | (data > pixel_max)))
    if bad:
        warnings.warn(f"{source}: clamped {bad} values outside [0, {pixel_max}]",
                      stacklevel=2)
        data = np.clip(data, 0.0, pixel_max)
    return Tensor((data / pixel_max - 0.5) / 0.5)


def denormalize_pixels(x: Tensor, pixel_max: float) -> Tensor:
    return Tensor((x.data * 0.5 + 0.5) * pixel_max)


@dataclass
class Sample:
    """Three cloudy frames plus the cloud-free target, all in [-1, 1]."""

    id: str
    cloudy: list[Tensor]
    target: Tensor


@dataclass
class ManifestEntry:
    id: str
    cloudy_paths: tuple[str, str, str]
    target_path: str

    def to_line(self) -> str:
        return "\t".join((self.id, *self.cloudy_paths, self.target_path))


def parse_manifest(text: str) -> list[ManifestEntry]:
    """Parse tab-separated manifest lines; '#' lines are comments."""
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"manifest line {lineno}: expected 5 tab-separated fields, "
                             f"got {len(fields)}")
        sid = fields[0]
        if sid in seen:
            raise ValueError(f"manifest line {lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        entries.append(ManifestEntry(sid, (fields[1], fields[2], fields[3]), fields[4]))
    return entries


def format_manifest(entries: list[ManifestEntry]) -> str:
    return "".join(e.to_line() + "\n" for e in entries)


def load_dataset(manifest_path, pixel_max: float) -> list[Sample]:
    """Load samples in manifest order, normalized to [-1, 1].

    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries = parse_manifest(manifest_path.read_text(encoding="utf-8"))
    samples = []
    for entry in entries:
        tensors = []
        for rel in (*entry.cloudy_paths, entry.target_path):
            path = root / rel
            if not path.exists():
                raise FileNotFoundError(f"sample {entry.id!r}: missing file {path}")
            tensors.append(normalize_pixels(read_tensor_file(path), pixel_max, source=str(path)))
        shapes = {t.shape for t in tensors}
        if len(shapes) != 1:
            raise ValueError(f"sample {entry.id!r}: mixed tensor shapes {sorted(shapes)}")
        samples.append(Sample(entry.id, tensors[:3], tensors[3]))
    return samples


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Sum of random-frequency, random-phase sinusoids, amplitude ~ 1/frequency."""
    ys, xs = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    out = np.zeros((size, size))
    for _ in range(_SINUSOIDS):
        freq = rng.uniform(1.0, 8.0)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += (1.0 / freq) * np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
    return out


def _rescale(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    fmin, fmax = field.min(), field.max()
    return (field - fmin) / (fmax - fmin) * (hi - lo) + lo


def _cloud_mask(rng: np.random.Generator, size: int, coverage: float) -> np.ndarray:
    field = _smooth_field(rng, size)
    if coverage <= 0.0:
        return np.zeros((size, size))
    if coverage >= 1.0:
        return np.ones((size, size))
    threshold = np.quantile(field, 1.0 - coverage)
    return (field >= threshold).astype(np.float64)


def synth_sample(seed: int, index: int, size: int, coverage: float,
                 pixel_max: float, channels: int = 4):
    """One deterministic sample: smooth target plus three cloud-occluded frames."""
    rng = np.random.default_rng([seed, index])
    target = np.stack(
        [_rescale(_smooth_field(rng, size), 0.1 * pixel_max, 0.9 * pixel_max)
         for _ in range(channels)])[None]
    cloudy = []
    for _ in range(3):
        mask = _cloud_mask(rng, size, coverage)[None, None]
        jitter = rng.uniform(-1.0, 1.0) * JITTER_FRACTION * pixel_max
        frame = target * (1.0 - mask) + CLOUD_ALBEDO * pixel_max * mask + jitter
        cloudy.append(Tensor(np.clip(frame, 0.0, pixel_max)))
    return cloudy, Tensor(target)


def synth_generate(out_dir, count: int, size: int, coverage: float, seed: int,
                   pixel_max: float = 255.0, split: str = "train") -> Path:
    """Write ``count`` synthetic samples plus a manifest; returns the manifest path."""
    if count < 1:
        raise ValueError(f"synth_generate: count must be >= 1, got {count}")
    if size < 16 or size % 16 != 0:
        raise ValueError(f"synth_generate: size must be a positive multiple of 16, got {size}")
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"synth_generate: coverage must be in [0, 1], got {coverage}")
    root = Path(out_dir)
    sample_dir = root / split
    sample_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for index in range(count):
        cloudy, target = synth_sample(seed, index, size, coverage, pixel_max)
        sid = f"s{index:04d}"
        names = [f"{sid}_c{k}.pmat" for k in range(3)] + [f"{sid}_target.pmat"]
        for name, tensor in zip(names, [*cloudy, target]):
            write_tensor_file(sample_dir / name, tensor)
        rel = [f"{split}/{name}" for name in names]
        entries.append(ManifestEntry(sid, tuple(rel[:3]), rel[3]))

    manifest_path = root / f"{split}.manifest"
    manifest_path.write_text(format_manifest(entries), encoding="utf-8")
    return manifest_path
