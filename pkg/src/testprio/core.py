"""Shared data model and array-file I/O.

All numeric payloads are float64 ndarrays regardless of on-disk precision;
float32 inputs are up-cast at load time. Instances are immutable after
construction and safe to share across workers.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 1e-6

_ALLOWED_DTYPES = (np.float32, np.float64, np.int64)


class DataError(ValueError):
    """An input file or array violates a data contract."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


@dataclass(frozen=True)
class ActivationMatrix:
    """Activation traces: rows are samples, columns are neurons.

    ``layer_offsets`` marks the column index where each layer's neurons
    begin; it must start at 0 and be strictly increasing.
    """

    values: np.ndarray
    layer_offsets: tuple = (0,)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"activation matrix must be 2-D, got {values.ndim}-D")
        if np.isnan(values).any():
            raise DataError("NaN values in activation matrix")
        offsets = tuple(int(o) for o in self.layer_offsets)
        if not offsets or offsets[0] != 0:
            raise DataError("layer_offsets must start at 0")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise DataError("layer_offsets must be strictly increasing")
        if offsets[-1] >= values.shape[1]:
            raise DataError("last layer segment is empty")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layer_offsets", offsets)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.values.shape[1]

    def layer_slices(self) -> list:
        """Column slices, one per layer."""
        bounds = list(self.layer_offsets) + [self.n_neurons]
        return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


@dataclass(frozen=True)
class SoftmaxMatrix:
    """Per-sample class likelihoods, rows summing to 1.

    Rows off by at most ``ROW_SUM_TOL`` are renormalized; anything worse
    is a data error, not repairable.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] < 2:
            raise DataError("softmax matrix must be 2-D with at least 2 classes")
        if np.isnan(values).any():
            raise DataError("NaN values in softmax matrix")
        if (values < 0).any() or (values > 1).any():
            raise DataError("softmax entries must lie in [0, 1]")
        sums = values.sum(axis=1)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if bad.any():
            row = int(np.argmax(bad))
            raise DataError(f"row sum {sums[row]:g} exceeds tolerance (row {row})")
        values = values / sums[:, None]
        object.__setattr__(self, "values", values)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]


def argmax_predictions(softmax: SoftmaxMatrix) -> np.ndarray:
    """Predicted class per row; ties broken by lowest class index."""
    return np.argmax(softmax.values, axis=1).astype(np.int64)


def validate_labels(labels, n_rows=None, n_classes=None) -> np.ndarray:
    """Validate an integer label vector and return it as int64."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError("labels must be a 1-D vector")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.issubdtype(labels.dtype, np.floating):
            as_int = labels.astype(np.int64)
            if not np.array_equal(as_int, labels):
                raise DataError("labels must be integers")
            labels = as_int
        else:
            raise DataError("labels must be integers")
    labels = labels.astype(np.int64)
    if (labels < 0).any():
        raise DataError("negative label")
    if n_rows is not None and len(labels) != n_rows:
        raise DataError(f"label count {len(labels)} != row count {n_rows}")
    if n_classes is not None and (labels >= n_classes).any():
        raise DataError(f"label out of range [0, {n_classes})")
    return labels


@dataclass(frozen=True)
class TestSet:
    """Bundled test inputs: activations, softmax, and ground truth."""

    __test__ = False  # keep pytest from collecting this as a test class

    activations: ActivationMatrix
    softmax: SoftmaxMatrix
    true_labels: np.ndarray
    predicted_labels: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.softmax.n_samples
        if self.activations.n_samples != n:
            raise DataError("activation / softmax row counts differ")
        labels = validate_labels(self.true_labels, n_rows=n,
                                 n_classes=self.softmax.n_classes)
        object.__setattr__(self, "true_labels", labels)
        object.__setattr__(self, "predicted_labels", argmax_predictions(self.softmax))

    @property
    def n_tests(self) -> int:
        return self.softmax.n_samples

    def misclassified(self) -> np.ndarray:
        return self.predicted_labels != self.true_labels


@dataclass(frozen=True)
class StochasticPredictionStack:
    """T stochastic softmax passes over the same tests: shape (T, tests, C)."""

    samples: np.ndarray

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 3 or samples.shape[0] < 1:
            raise DataError("prediction stack must be (T, tests, C) with T >= 1")
        # validate each slice under the softmax contract; keep renormalized values
        slices = [SoftmaxMatrix(samples[i]).values for i in range(samples.shape[0])]
        object.__setattr__(self, "samples", np.stack(slices))

    @property
    def n_passes(self) -> int:
        return self.samples.shape[0]

    @property
    def n_tests(self) -> int:
        return self.samples.shape[1]


# ---------------------------------------------------------------------------
# Array file I/O (.npy version 1.0, CSV fallback)
# ---------------------------------------------------------------------------

def _read_array(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except Exception as exc:
            raise DataError(f"malformed array file {path}: {exc}") from exc
        if arr.dtype.type not in _ALLOWED_DTYPES:
            raise DataError(f"unsupported dtype {arr.dtype} in {path}")
        return arr
    if path.suffix == ".csv":
        try:
            return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        except Exception as exc:
            raise DataError(f"malformed CSV file {path}: {exc}") from exc
    raise DataError(f"unknown array format: {path}")


def load_matrix(path, expected_kind: str):
    """Load and validate an array file.

    ``expected_kind`` is one of ``activations``, ``softmax``, ``labels``.
    Returns an :class:`ActivationMatrix`, :class:`SoftmaxMatrix`, or an
    int64 label vector respectively.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    arr = _read_array(path)
    if expected_kind == "activations":
        offsets = _sidecar_offsets(path)
        return ActivationMatrix(arr, offsets)
    if expected_kind == "softmax":
        return SoftmaxMatrix(arr)
    if expected_kind == "labels":
        return validate_labels(arr.ravel() if arr.ndim == 2 and 1 in arr.shape else arr)
    raise ValueError(f"unknown kind {expected_kind!r}")


def _sidecar_offsets(path: Path) -> tuple:
    sidecar = path.with_suffix(".layers.json")
    if sidecar.exists():
        with open(sidecar) as fh:
            return tuple(json.load(fh)["layer_offsets"])
    return (0,)


def save_matrix(path, array: np.ndarray) -> None:
    """Write an array as .npy or CSV (by suffix), atomically."""
    path = Path(path)
    array = np.asarray(array)
    if path.suffix == ".npy":
        with _atomic_open(path) as fh:
            np.save(fh, array)
    elif path.suffix == ".csv":
        header = ",".join(f"c{i}" for i in range(array.shape[1] if array.ndim == 2 else 1))
        with _atomic_open(path, text=True) as fh:
            fh.write(header + "\n")
            np.savetxt(fh, np.atleast_2d(array), delimiter=",", fmt="%.17g")
    else:
        raise DataError(f"unknown array format: {path}")


class _atomic_open:
    """Write to a temp file in the target directory, then rename."""

    def __init__(self, path: Path, text: bool = False):
        self.path = Path(path)
        self.text = text

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=self.path.parent,
                                        prefix=self.path.name + ".")
        self.fh = os.fdopen(fd, "w" if self.text else "wb",
                            newline="" if self.text else None)
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def write_bytes_atomic(path, payload: bytes) -> None:
    with _atomic_open(path) as fh:
        fh.write(payload)


def write_text_atomic(path, payload: str) -> None:
    with _atomic_open(path, text=True) as fh:
        fh.write(payload)
