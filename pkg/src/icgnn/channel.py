"""Interference-channel sample generation and the binary dataset format.

A system instance is K transmitter-receiver pairs, each transmitter carrying
N_T antennas and each receiver a single antenna.  h[k, j] is the channel from
transmitter k to receiver j.  Small-scale fading is i.i.d. Rayleigh: every
entry is circularly-symmetric complex Gaussian with unit variance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

DATASET_MAGIC = b"ICGN"
DATASET_VERSION = 1
_FLAG_LABELS = 1
# magic, version, K, N_T, count, flags, snr_db, p_max, p_circuit, r_req, seed
_HEADER = struct.Struct("<4sHHHIHffffQ")


class DatasetFormatError(ValueError):
    """Raised when a dataset file fails structural validation."""


@dataclass(frozen=True)
class SystemConfig:
    """Static system parameters; noise power is derived from the SNR."""

    n_pairs: int
    n_antennas: int
    p_max: float = 1.0
    p_circuit: float = 0.1
    r_req: float = 1.0
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.n_antennas < 1:
            raise ValueError(f"n_antennas must be >= 1, got {self.n_antennas}")
        if not self.p_max > 0:
            raise ValueError(f"p_max must be positive, got {self.p_max}")
        if self.p_circuit < 0:
            raise ValueError(f"p_circuit must be >= 0, got {self.p_circuit}")
        if self.r_req < 0:
            raise ValueError(f"r_req must be >= 0, got {self.r_req}")
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def noise_power(self) -> float:
        return noise_power(self)


def noise_power(config: SystemConfig) -> float:
    """Receiver noise power: p_max / 10^(snr_db / 10)."""
    return config.p_max / 10.0 ** (config.snr_db / 10.0)


@dataclass
class Dataset:
    """A batch of channel samples plus optional per-sample max-EE labels.

    ``h`` has shape (count, K, K, N_T), complex64 so file round-trips are
    lossless.  Labels are float64 bits/Hz/Joule; NaN marks samples where the
    reference solver found no feasible point (excluded from optimality
    averaging).  ``split`` is an optional train/validation/test tag.
    """

    config: SystemConfig
    h: np.ndarray
    labels: np.ndarray | None = None
    split: str | None = None

    def __post_init__(self):
        k, n = self.config.n_pairs, self.config.n_antennas
        if self.h.ndim != 4 or self.h.shape[1:] != (k, k, n):
            raise ValueError(f"channel tensor shape {self.h.shape} inconsistent with K={k}, N_T={n}")
        if self.h.dtype != np.complex64:
            self.h = self.h.astype(np.complex64)
        if not np.all(np.isfinite(self.h)):
            raise ValueError("channel tensor contains non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (len(self),):
                raise ValueError(f"{self.labels.shape[0]} labels for {len(self)} samples")
            finite = self.labels[np.isfinite(self.labels)]
            if np.any(finite <= 0):
                raise ValueError("labels for solver-feasible samples must be positive")

    def __len__(self) -> int:
        return self.h.shape[0]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        labels = self.labels[idx] if self.labels is not None else None
        return Dataset(self.config, self.h[idx], labels, split or self.split)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # counter-based stream keyed by (seed, sample index): generation order-free
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_channels(config: SystemConfig, count: int, first_index: int = 0) -> Dataset:
    """Draw ``count`` i.i.d. Rayleigh channel samples.

    Each sample's stream is keyed by (config.seed, global sample index), so
    regenerating any sub-range reproduces the same values.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    k, n = config.n_pairs, config.n_antennas
    h = np.empty((count, k, k, n), dtype=np.complex64)
    for i in range(count):
        draws = _sample_rng(config.seed, first_index + i).standard_normal((k, k, n, 2))
        draws *= np.sqrt(0.5)  # unit complex variance: each plane variance 1/2
        h[i] = draws[..., 0] + 1j * draws[..., 1]
    return Dataset(config, h)


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1)) -> dict[str, Dataset]:
    """Split into train/validation/test by contiguous ranges; ratios sum to 1."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(dataset)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    parts = {
        "train": np.arange(0, n_train),
        "validation": np.arange(n_train, n_train + n_val),
        "test": np.arange(n_train + n_val, n),
    }
    return {name: dataset.subset(idx, split=name) for name, idx in parts.items()}


def write_dataset(path, dataset: Dataset) -> None:
    cfg = dataset.config
    flags = _FLAG_LABELS if dataset.labeled else 0
    header = _HEADER.pack(
        DATASET_MAGIC,
        DATASET_VERSION,
        cfg.n_pairs,
        cfg.n_antennas,
        len(dataset),
        flags,
        cfg.snr_db,
        cfg.p_max,
        cfg.p_circuit,
        cfg.r_req,
        cfg.seed,
    )
    # interleaved (re, im) f32 pairs in [sample][k][j][antenna] order
    planes = np.empty(dataset.h.shape + (2,), dtype="<f4")
    planes[..., 0] = dataset.h.real
    planes[..., 1] = dataset.h.imag
    with open(path, "wb") as f:
        f.write(header)
        f.write(planes.tobytes())
        if dataset.labeled:
            f.write(dataset.labels.astype("<f8").tobytes())


def read_dataset(path, expect: SystemConfig | None = None) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("unexpected end of header segment")
    magic, version, k, n, count, flags, snr_db, p_max, p_circuit, r_req, seed = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    if k < 1 or n < 1:
        raise DatasetFormatError(f"invalid shape fields K={k}, N_T={n}")
    config = SystemConfig(
        n_pairs=k,
        n_antennas=n,
        p_max=float(p_max),
        p_circuit=float(p_circuit),
        r_req=float(r_req),
        snr_db=float(snr_db),
        seed=seed,
    )
    if expect is not None:
        for name in ("n_pairs", "n_antennas"):
            want, got = getattr(expect, name), getattr(config, name)
            if want != got:
                raise DatasetFormatError(f"dimension mismatch: file has {name}={got}, caller expects {want}")
    offset = _HEADER.size
    n_floats = count * k * k * n * 2
    end = offset + 4 * n_floats
    if len(raw) < end:
        raise DatasetFormatError("unexpected end of samples segment")
    planes = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=offset).reshape(count, k, k, n, 2)
    h = (planes[..., 0] + 1j * planes[..., 1]).astype(np.complex64)
    labels = None
    if flags & _FLAG_LABELS:
        if len(raw) < end + 8 * count:
            raise DatasetFormatError("unexpected end of labels segment")
        labels = np.frombuffer(raw, dtype="<f8", count=count, offset=end).copy()
    return Dataset(config, h, labels)
