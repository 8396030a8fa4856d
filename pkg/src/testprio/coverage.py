"""Neuron-coverage profiling: NAC, KMNC, NBC, SNAC, TKNC.

Training statistics are fitted once; test activations are reduced to
bit-packed boolean coverage profiles, optionally in bounded-memory batches.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import ActivationMatrix, DataError, write_bytes_atomic

METHODS = ("NAC", "KMNC", "NBC", "SNAC", "TKNC")

POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass(frozen=True)
class NeuronStats:
    """Per-neuron min / max / population std over the training set."""

    minimum: np.ndarray
    maximum: np.ndarray
    std: np.ndarray

    @property
    def n_neurons(self) -> int:
        return len(self.minimum)


@dataclass(frozen=True)
class NCConfig:
    method: str
    k: float  # threshold (NAC), shift multiplier (NBC/SNAC), or integer section/top count
    batch_size: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataError(f"unknown coverage method {self.method!r}")
        if self.method in ("KMNC", "TKNC"):
            if self.k != int(self.k) or self.k < 1:
                raise DataError(f"{self.method} requires integer k >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be positive")

    @property
    def k_int(self) -> int:
        return int(self.k)

    @property
    def targets_per_neuron(self) -> int:
        if self.method == "KMNC":
            return self.k_int
        if self.method == "NBC":
            return 2
        return 1


@dataclass(frozen=True)
class CoverageProfile:
    """Bit-packed boolean matrix (tests x targets), one row per test.

    Rows are packed independently (big-endian bit order within a byte),
    so profiles from batches can be concatenated row-wise.
    """

    packed: np.ndarray  # uint8, shape (rows, ceil(n_targets / 8))
    n_targets: int
    targets_per_neuron: int = 1
    method: str = ""
    k: float = 0.0

    @property
    def n_rows(self) -> int:
        return self.packed.shape[0]

    def row_counts(self) -> np.ndarray:
        """Number of covered targets per test."""
        return POPCOUNT8[self.packed].sum(axis=1)

    def to_bool(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.n_targets).astype(bool)


def pack_profile(bits: np.ndarray, targets_per_neuron: int = 1,
                 method: str = "", k: float = 0.0) -> CoverageProfile:
    bits = np.asarray(bits, dtype=bool)
    packed = np.packbits(bits, axis=1)
    return CoverageProfile(packed, bits.shape[1], targets_per_neuron, method, k)


def fit_neuron_stats(train: ActivationMatrix) -> NeuronStats:
    """Column-wise min, max and population std over the training set."""
    if train.n_samples < 2:
        raise DataError("need at least 2 training rows to fit neuron stats")
    v = train.values
    return NeuronStats(v.min(axis=0), v.max(axis=0), v.std(axis=0, ddof=0))


def _profile_bits(values: np.ndarray, stats: NeuronStats, cfg: NCConfig,
                  layer_slices) -> np.ndarray:
    n, a = values.shape
    if a != stats.n_neurons:
        raise DataError(f"test has {a} neurons, stats have {stats.n_neurons}")

    if cfg.method == "NAC":
        return values > cfg.k

    if cfg.method == "KMNC":
        k = cfg.k_int
        mn, mx = stats.minimum, stats.maximum
        width = (mx - mn) / k
        bits = np.zeros((n, a, k), dtype=bool)
        for s in range(k):
            lo = mn + s * width
            hi = mn + (s + 1) * width
            if s < k - 1:
                bits[:, :, s] = (values >= lo) & (values < hi)
            else:
                bits[:, :, s] = (values >= lo) & (values <= mx)
        # constant-range neurons: act == min covers segment 0, nothing else
        const = mx == mn
        if const.any():
            bits[:, const, :] = False
            bits[:, const, 0] = values[:, const] == mn[const]
        return bits.reshape(n, a * k)

    if cfg.method == "NBC":
        low = values < stats.minimum - cfg.k * stats.std
        high = values > stats.maximum + cfg.k * stats.std
        return np.stack([low, high], axis=2).reshape(n, 2 * a)

    if cfg.method == "SNAC":
        return values > stats.maximum + cfg.k * stats.std

    # TKNC: within each layer, the k highest activations are covered;
    # ties at the cutoff cover all tied neurons.
    k = cfg.k_int
    bits = np.zeros((n, a), dtype=bool)
    for sl in layer_slices:
        layer = values[:, sl]
        width = layer.shape[1]
        if k > width:
            raise DataError(f"TKNC k={k} exceeds layer width {width}")
        cutoff = np.partition(layer, width - k, axis=1)[:, width - k]
        bits[:, sl] = layer >= cutoff[:, None]
    return bits


def coverage_profile(test: ActivationMatrix, stats: NeuronStats,
                     cfg: NCConfig) -> CoverageProfile:
    """Boolean coverage profile of a test set under one NC variant."""
    bits = _profile_bits(test.values, stats, cfg, test.layer_slices())
    return pack_profile(bits, cfg.targets_per_neuron, cfg.method, cfg.k)


def stream_profiles(batches, stats: NeuronStats, cfg: NCConfig) -> CoverageProfile:
    """Profile a test set given as an in-order sequence of batches.

    Bit-identical to :func:`coverage_profile` on the concatenated matrix;
    transient float storage stays proportional to the largest batch.
    """
    chunks = []
    n_neurons = None
    for batch in batches:
        if n_neurons is None:
            n_neurons = batch.n_neurons
        elif batch.n_neurons != n_neurons:
            raise DataError("inconsistent column counts across batches")
        chunks.append(coverage_profile(batch, stats, cfg).packed)
    if not chunks:
        raise DataError("no batches supplied")
    packed = np.vstack(chunks)
    n_targets = n_neurons * cfg.targets_per_neuron
    return CoverageProfile(packed, n_targets, cfg.targets_per_neuron,
                           cfg.method, cfg.k)


def iter_batches(test: ActivationMatrix, batch_size: int):
    """Split a test matrix into row batches preserving layer structure."""
    for start in range(0, test.n_samples, batch_size):
        yield ActivationMatrix(test.values[start:start + batch_size],
                               test.layer_offsets)


# ---------------------------------------------------------------------------
# On-disk profile container: JSON header + contiguous bit payload
# ---------------------------------------------------------------------------

_PROFILE_MAGIC = b"NCPROF1\n"


def save_profile(path, profile: CoverageProfile) -> None:
    """Write a profile as JSON header plus flattened bit-packed payload.

    The payload is bit-contiguous across rows (no per-row padding), so it
    occupies exactly ceil(rows * targets / 8) bytes.
    """
    header = {
        "rows": profile.n_rows,
        "targets": profile.n_targets,
        "targets_per_neuron": profile.targets_per_neuron,
        "method": profile.method,
        "k": profile.k,
    }
    payload = np.packbits(profile.to_bool().ravel()).tobytes()
    blob = _PROFILE_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    write_bytes_atomic(path, blob)


def load_profile(path) -> CoverageProfile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_PROFILE_MAGIC):
        raise DataError(f"not a coverage profile file: {path}")
    head, _, rest = blob[len(_PROFILE_MAGIC):].partition(b"\n")
    header = json.loads(head)
    rows, targets = header["rows"], header["targets"]
    flat = np.unpackbits(np.frombuffer(rest, dtype=np.uint8),
                         count=rows * targets).astype(bool)
    return pack_profile(flat.reshape(rows, targets),
                        header["targets_per_neuron"], header["method"],
                        header["k"])
