"""Synthetic signal distributions, dataset assembly, and image ingestion."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .container import load_container, save_container
from .errors import ConfigurationError, FormatError

__all__ = [
    "PiecewiseConstantSpec",
    "Dataset",
    "sample_piecewise_constant",
    "make_dataset",
    "load_idx_images",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class PiecewiseConstantSpec:
    """Distribution of piecewise-constant signals with zero boundaries.

    Signals start and end on a zero segment, carry between ``jumps_min``
    and ``jumps_max`` jumps of magnitude in [amp_min, amp_max] (random
    sign), and keep every segment at least ``min_gap`` samples long.
    Because the boundary segments are pinned to zero, the jump amplitudes
    must cancel; a single jump is therefore impossible and jump counts of
    exactly 1 are excluded.
    """

    N: int = 256
    jumps_min: int = 2
    jumps_max: int = 6
    amp_min: float = 0.5
    amp_max: float = 2.0
    min_gap: int = 10

    def __post_init__(self):
        if not (0 <= self.jumps_min <= self.jumps_max):
            raise ConfigurationError("need 0 <= jumps_min <= jumps_max")
        if self.min_gap < 1:
            raise ConfigurationError("min_gap must be >= 1")
        if (self.jumps_max + 1) * self.min_gap > self.N:
            raise ConfigurationError(
                f"(jumps_max+1)*min_gap = {(self.jumps_max + 1) * self.min_gap} "
                f"exceeds N = {self.N}"
            )
        if not (0 <= self.amp_min <= self.amp_max):
            raise ConfigurationError("need 0 <= amp_min <= amp_max")
        if self.jumps_min == self.jumps_max == 1:
            raise ConfigurationError(
                "exactly one jump cannot return to the zero boundary"
            )

    def jump_counts(self):
        counts = [k for k in range(self.jumps_min, self.jumps_max + 1) if k != 1]
        if not counts:
            raise ConfigurationError("no feasible jump count in range")
        return counts


@dataclass
class Dataset:
    """Paired ground-truth signals and measurements for one operator."""

    signals: np.ndarray  # (M, N)
    measurements: np.ndarray  # (M, m)
    operator: object
    noise_spec: str = "none"
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.signals.shape[0] != self.measurements.shape[0]:
            raise ConfigurationError("signals and measurements must pair up")

    def __len__(self):
        return self.signals.shape[0]


def _sample_amplitudes(k, amp_min, amp_max, rng, max_tries=1000):
    """Draw k jump amplitudes summing to zero, each magnitude in range."""
    if k == 0:
        return np.zeros(0)
    for _ in range(max_tries):
        a = rng.uniform(amp_min, amp_max, size=k - 1) * rng.choice(
            [-1.0, 1.0], size=k - 1
        )
        last = -a.sum()
        if amp_min <= abs(last) <= amp_max:
            return np.concatenate([a, [last]])
    raise ConfigurationError(
        f"could not draw {k} cancelling jump amplitudes in "
        f"[{amp_min}, {amp_max}] after {max_tries} tries"
    )


def sample_piecewise_constant(spec, rng):
    """Draw one signal from the distribution described by ``spec``."""
    counts = spec.jump_counts()
    k = counts[rng.integers(len(counts))]
    if k == 0:
        return np.zeros(spec.N)
    # jump positions i*min_gap + e_i with sorted extras keep all segments
    # (including both boundary segments) at least min_gap long
    slack = spec.N - (k + 1) * spec.min_gap
    extras = np.sort(rng.integers(0, slack + 1, size=k))
    positions = spec.min_gap * np.arange(1, k + 1) + extras
    amps = _sample_amplitudes(k, spec.amp_min, spec.amp_max, rng)
    x = np.zeros(spec.N)
    level = 0.0
    prev = 0
    for pos, amp in zip(positions, amps):
        x[prev:pos] = level
        level += amp
        prev = pos
    x[prev:] = level  # level sums to zero here by construction
    return x


def make_dataset(A, spec, M, noise=None, rng=None):
    """Assemble M pairs (x, y = A x + e) from a signal source.

    ``spec`` is either a :class:`PiecewiseConstantSpec` or an (M, N)
    array of pre-drawn signals.  ``noise`` is None for exact
    measurements or a callable ``(m, rng) -> e``.  The result is a pure
    function of the rng seed.
    """
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if isinstance(spec, PiecewiseConstantSpec):
        signals = np.stack([sample_piecewise_constant(spec, rng) for _ in range(M)])
        desc = "synthetic"
    else:
        signals = np.asarray(spec, dtype=np.float64)[:M].copy()
        desc = "given"
    measurements = (A.matrix @ signals.T).T
    noise_desc = "none"
    if noise is not None:
        for i in range(M):
            measurements[i] += noise(A.m, rng)
        noise_desc = getattr(noise, "description", "custom")
    return Dataset(signals, measurements, A, f"{desc}/{noise_desc}")


# ---------------------------------------------------------------------------
# IDX image files (big-endian magic + dims header, then raw bytes)

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_be32(data, offset, path):
    if offset + 4 > len(data):
        raise FormatError(f"{path}: truncated at byte {len(data)} (need {offset + 4})")
    return struct.unpack_from(">i", data, offset)[0]


def load_idx_images(images_path, labels_path=None):
    """Read an IDX image file (and optional label file).

    Returns ``(images, labels)`` where images is (M, H*W) float64 scaled
    to [0, 1] and labels is (M,) int64 or None.  Any deviation from the
    published layout raises :class:`FormatError` with a byte offset; a
    truncated file never yields a partial dataset.
    """
    data = open(images_path, "rb").read()
    magic = _read_be32(data, 0, images_path)
    if magic != _IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{_IDX_IMAGES_MAGIC:08x})"
        )
    count = _read_be32(data, 4, images_path)
    rows = _read_be32(data, 8, images_path)
    cols = _read_be32(data, 12, images_path)
    if min(count, rows, cols) < 0:
        raise FormatError(f"{images_path}: negative dimension in header at byte 4")
    need = 16 + count * rows * cols
    if len(data) != need:
        raise FormatError(
            f"{images_path}: payload is {len(data) - 16} bytes at byte 16, "
            f"expected {count * rows * cols}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    labels = None
    if labels_path is not None:
        ldata = open(labels_path, "rb").read()
        lmagic = _read_be32(ldata, 0, labels_path)
        if lmagic != _IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{lmagic:08x} at byte 0 "
                f"(expected 0x{_IDX_LABELS_MAGIC:08x})"
            )
        lcount = _read_be32(ldata, 4, labels_path)
        if lcount != count:
            raise FormatError(
                f"{labels_path}: {lcount} labels for {count} images (byte 4)"
            )
        if len(ldata) != 8 + lcount:
            raise FormatError(
                f"{labels_path}: payload is {len(ldata) - 8} bytes at byte 8, "
                f"expected {lcount}"
            )
        labels = np.frombuffer(ldata, dtype=np.uint8, offset=8).astype(np.int64)
    return images, labels


def save_dataset(path, dataset, meta=None):
    arrays = {"signals": dataset.signals, "measurements": dataset.measurements}
    if dataset.labels is not None:
        arrays["labels"] = dataset.labels
    info = {"noise_spec": dataset.noise_spec}
    info.update(meta or {})
    save_container(path, arrays, info)


def load_dataset(path, operator=None):
    arrays, meta = load_container(path)
    return Dataset(
        arrays["signals"],
        arrays["measurements"],
        operator,
        meta.get("noise_spec", "none"),
        labels=arrays.get("labels"),
    )
