"""Dense float64 matrices, deterministic seeded randomness, Gaussian sampling.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major order; every
exported operation keeps entries finite. Randomness goes through
:class:`RngStream`, a value-style wrapper around a counter-based 64-bit
generator: the same ``(seed, stream_index)`` always reproduces the same
sample sequence within this implementation, and distinct stream indices
give statistically independent streams.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "RngStream",
    "sample_gaussian_matrix",
    "frobenius_sq",
    "require_finite",
    "load_matrix_csv",
    "save_matrix_csv",
]


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_index)``.

    Each draw advances the stream; passing the same stream object to a
    sequence of operations is reproducible, and workers running in parallel
    should each own a distinct ``stream_index`` under a shared seed.
    """

    def __init__(self, seed: int, stream_index: int = 0):
        self.seed = int(seed)
        self.stream_index = int(stream_index)
        key = [self.seed % 2**64, self.stream_index % 2**64]
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream_index: int) -> "RngStream":
        """Fresh independent stream under the same seed."""
        return RngStream(self.seed, stream_index)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self) -> float:
        """One uniform variate on [0, 1)."""
        return float(self._gen.random())

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def counter(self) -> tuple:
        """Snapshot of the generator counter (cheap state fingerprint)."""
        state = self._gen.bit_generator.state["state"]
        return tuple(int(v) for v in state["counter"])

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_index={self.stream_index})"


def sample_gaussian_matrix(rng: RngStream, rows: int, cols: int, std: float) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0, std^2) entries.

    std = 0 yields the exact zero matrix; the stream advances by the same
    amount regardless of std, so consumption is deterministic.
    """
    if rows < 0 or cols < 0:
        raise ValueError(f"matrix dimensions must be nonnegative, got {rows}x{cols}")
    if std < 0:
        raise ValueError(f"standard deviation must be nonnegative, got {std}")
    return std * rng.standard_normal((rows, cols))


def frobenius_sq(m: np.ndarray) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    m = np.asarray(m, dtype=float)
    return float(np.sum(m * m))


def require_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{what} contains non-finite entries")
    return m


def save_matrix_csv(path, m: np.ndarray) -> None:
    """Write a matrix as CSV: first line "rows,cols", then one row per line."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    require_finite(m, "matrix to save")
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]},{m.shape[1]}\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    """Read a matrix written by :func:`save_matrix_csv`."""
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            rows, cols = (int(tok) for tok in header.split(","))
        except ValueError:
            raise ValueError(f"{path}: bad header {header!r}, expected 'rows,cols'") from None
        data = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data.append([float(tok) for tok in line.split(",")])
    m = np.asarray(data, dtype=float)
    if m.size == 0:
        m = m.reshape(rows, cols) if rows * cols == 0 else m
    if m.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols} but body is {m.shape}")
    return require_finite(m, f"matrix from {path}")
