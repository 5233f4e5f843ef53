"""Dense float64 helpers, the seeded RNG and the spectral checks used everywhere else.

Matrices are plain C-ordered ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RNG_ALGORITHM = "philox4x64-10 (numpy.random.Philox), normals via numpy Generator ziggurat"


class ShapeError(ValueError):
    pass


@dataclass
class SeededRng:
    """Counter-based generator (Philox) keyed by an unsigned 64-bit seed.

    ``derive(*keys)`` gives an independent child stream that depends only on
    ``(seed, *keys)``, so per-trial streams do not depend on scheduling order.
    """

    seed: int
    algorithm: str = field(default=RNG_ALGORITHM, init=False)

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.seed = int(self.seed)
        self.path: tuple[int, ...] = ()
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def derive(self, *keys: int) -> "SeededRng":
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child.algorithm = self.algorithm
        child.path = self.path + tuple(int(k) for k in keys)
        entropy = [self.seed, *child.path]
        child.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
        return child

    def normal(self, size, stddev: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(size) * stddev

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)


def as_rng(rng: SeededRng | int) -> SeededRng:
    return rng if isinstance(rng, SeededRng) else SeededRng(int(rng))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def gaussian_matrix(rng: SeededRng, rows: int, cols: int, stddev: float = 1.0) -> np.ndarray:
    """I.i.d. N(0, stddev^2) entries drawn from ``rng``."""
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    return rng.normal((rows, cols), stddev)


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > 1e-10 * scale:
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    return 0.5 * (a + a.T)


def symmetric_eigenvalues(a: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(_check_symmetric(a))


def min_eigenvalue_sym(a: np.ndarray, tol: float = 1e-12) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Uses a full LAPACK symmetric eigendecomposition (``syevd``), whose backward
    error is a small multiple of machine epsilon times the spectral norm; ``tol``
    below 1e-14 cannot be honoured and is rejected.
    """
    if tol < 1e-14:
        raise ValueError(f"tol={tol} is below the achievable accuracy of a float64 eigensolver")
    return float(symmetric_eigenvalues(a)[0])


def write_matrix_csv(a: np.ndarray, path: str | Path | io.TextIOBase) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    lines += [",".join(format(v, ".17g") for v in row) for row in a]
    text = "\n".join(lines) + "\n"
    if isinstance(path, io.TextIOBase):
        path.write(text)
    else:
        Path(path).write_text(text)


def read_matrix_csv(path: str | Path | io.TextIOBase) -> np.ndarray:
    text = path.read() if isinstance(path, io.TextIOBase) else Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    rows, cols = (int(v) for v in lines[0].split(","))
    data = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    out = np.array(data, dtype=np.float64).reshape(rows, cols)
    if len(lines) - 1 != rows:
        raise ValueError(f"header declares {rows} rows, found {len(lines) - 1}")
    return out


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r2: float


def fit_line(x, y) -> LineFit:
    """Ordinary least squares y = slope * x + intercept, with R^2."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError(f"fit_line needs two equal-length 1-D arrays, got {x.shape} and {y.shape}")
    if np.ptp(x) == 0:
        raise ValueError("fit_line: all x values are equal")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return LineFit(float(slope), float(intercept), r2)
