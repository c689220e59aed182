"""Cone descriptors and Euclidean projections.

PSD blocks use the scaled lower-triangular vectorization (``svec``): the
diagonal is stored as is and every off-diagonal entry is multiplied by
sqrt(2), so that ``svec(A) @ svec(B) == trace(A @ B)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ZERO = "zero"
NONNEG = "nonneg"
SOC = "soc"
RSOC = "rsoc"
PSD = "psd"

KINDS = (ZERO, NONNEG, SOC, RSOC, PSD)

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class Cone:
    """A single cone block.

    ``size`` is the number of rows for every kind except ``psd``, where it
    is the matrix order m (the block then spans m(m+1)/2 rows).
    """

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("cone size must be positive")
        if self.kind == SOC and self.size < 1:
            raise ValueError("soc cone needs at least one row")
        if self.kind == RSOC and self.size < 2:
            raise ValueError("rsoc cone needs at least two rows")

    @property
    def rows(self) -> int:
        if self.kind == PSD:
            return self.size * (self.size + 1) // 2
        return self.size

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size}


@lru_cache(maxsize=None)
def _tril_index(m: int):
    # column-major lower triangle, matching svec ordering
    rows, cols = [], []
    for j in range(m):
        for i in range(j, m):
            rows.append(i)
            cols.append(j)
    rows = np.array(rows)
    cols = np.array(cols)
    scale = np.where(rows == cols, 1.0, SQRT2)
    return rows, cols, scale


def svec(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    rows, cols, scale = _tril_index(mat.shape[0])
    return mat[rows, cols] * scale


def smat(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    m = int(round((np.sqrt(8 * vec.size + 1) - 1) / 2))
    if m * (m + 1) // 2 != vec.size:
        raise ValueError("vector length is not triangular")
    rows, cols, scale = _tril_index(m)
    out = np.zeros((m, m))
    out[rows, cols] = vec / scale
    out[cols, rows] = vec / scale
    return out


def svec_index(m: int, i: int, j: int) -> int:
    """Row offset of entry (i, j) inside a psd(m) block."""
    if i < j:
        i, j = j, i
    # entries in columns before j: sum_{c<j} (m - c)
    return j * m - j * (j - 1) // 2 + (i - j)


def project_soc(point: np.ndarray) -> np.ndarray:
    t = point[0]
    x = point[1:]
    nx = np.linalg.norm(x)
    if nx <= t:
        return point.copy()
    if nx <= -t:
        return np.zeros_like(point)
    alpha = 0.5 * (t + nx)
    out = np.empty_like(point)
    out[0] = alpha
    out[1:] = (alpha / nx) * x
    return out


def project_soc_rows(P: np.ndarray) -> np.ndarray:
    """Project every row of ``P`` (t, x) onto the second-order cone."""
    t = P[:, 0]
    nx = np.sqrt(np.einsum("ij,ij->i", P[:, 1:], P[:, 1:]))
    out = P.copy()
    zero = nx <= -t
    mid = (nx > np.abs(t))
    alpha = 0.5 * (t[mid] + nx[mid])
    out[mid, 0] = alpha
    out[mid, 1:] = P[mid, 1:] * (alpha / nx[mid])[:, None]
    out[zero] = 0.0
    return out


def _rotate(P: np.ndarray) -> np.ndarray:
    # (u, v) -> ((u + v)/sqrt2, (u - v)/sqrt2) is its own inverse
    out = P.copy()
    out[:, 0] = (P[:, 0] + P[:, 1]) / SQRT2
    out[:, 1] = (P[:, 0] - P[:, 1]) / SQRT2
    return out


def project_rsoc(point: np.ndarray) -> np.ndarray:
    # {(u, v, w): 2uv >= |w|^2, u, v >= 0} is an orthogonal image of the SOC
    u, v = point[0], point[1]
    rotated = point.copy()
    rotated[0] = (u + v) / SQRT2
    rotated[1] = (u - v) / SQRT2
    proj = project_soc(rotated)
    out = proj.copy()
    out[0] = (proj[0] + proj[1]) / SQRT2
    out[1] = (proj[0] - proj[1]) / SQRT2
    return out


def project_psd(point: np.ndarray) -> np.ndarray:
    mat = smat(point)
    w, q = np.linalg.eigh(mat)
    if w[0] >= 0:
        return point.copy()
    w = np.maximum(w, 0.0)
    return svec((q * w) @ q.T)


def project_cone(point, cone: Cone, dual: bool = False) -> np.ndarray:
    """Euclidean projection of ``point`` onto ``cone``.

    With ``dual=True`` the projection is onto the dual cone; only the zero
    cone differs (its dual is the whole space).
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (cone.rows,):
        raise ValueError(f"point has shape {point.shape}, cone needs {cone.rows} rows")
    if cone.kind == ZERO:
        return point.copy() if dual else np.zeros_like(point)
    if cone.kind == NONNEG:
        return np.maximum(point, 0.0)
    if cone.kind == SOC:
        return project_soc(point)
    if cone.kind == RSOC:
        return project_rsoc(point)
    return project_psd(point)


def cone_distance(point, cone: Cone, dual: bool = False) -> float:
    point = np.asarray(point, dtype=float)
    return float(np.linalg.norm(point - project_cone(point, cone, dual=dual)))


class ConeLayout:
    """Vectorized projection over a stacked sequence of cone blocks."""

    def __init__(self, cones):
        self.cones = list(cones)
        self.m = sum(c.rows for c in self.cones)
        zero = np.zeros(self.m, dtype=bool)
        nonneg = np.zeros(self.m, dtype=bool)
        self.soc = []
        self.rsoc = []
        self.psd = []
        offset = 0
        for cone in self.cones:
            sl = slice(offset, offset + cone.rows)
            if cone.kind == ZERO:
                zero[sl] = True
            elif cone.kind == NONNEG:
                nonneg[sl] = True
            elif cone.kind == SOC:
                self.soc.append(sl)
            elif cone.kind == RSOC:
                self.rsoc.append(sl)
            else:
                self.psd.append((sl, cone.size))
            offset += cone.rows
        self.zero = zero
        self.nonneg = nonneg
        # equal-size second-order blocks are projected together
        self.soc_groups = self._group(self.soc)
        self.rsoc_groups = self._group(self.rsoc)
        self.zero_idx = np.flatnonzero(zero)
        self.nonneg_idx = np.flatnonzero(nonneg)

    @staticmethod
    def _group(slices):
        by_size = {}
        for sl in slices:
            by_size.setdefault(sl.stop - sl.start, []).append(sl.start)
        return [np.asarray(starts)[:, None] + np.arange(size)[None, :] for size, starts in sorted(by_size.items())]

    def block_slices(self):
        offset = 0
        for cone in self.cones:
            yield cone, slice(offset, offset + cone.rows)
            offset += cone.rows

    def project(self, vec: np.ndarray, dual: bool = False) -> np.ndarray:
        out = vec.copy()
        if not dual and self.zero_idx.size:
            out[self.zero_idx] = 0.0
        if self.nonneg_idx.size:
            out[self.nonneg_idx] = np.maximum(out[self.nonneg_idx], 0.0)
        for idx in self.soc_groups:
            out[idx] = project_soc_rows(vec[idx])
        for idx in self.rsoc_groups:
            out[idx] = _rotate(project_soc_rows(_rotate(vec[idx])))
        for sl, _ in self.psd:
            out[sl] = project_psd(vec[sl])
        return out

    def distance(self, vec: np.ndarray, dual: bool = False) -> float:
        return float(np.linalg.norm(vec - self.project(vec, dual=dual)))
