"""Conic program container, a small affine-expression builder, and JSON I/O.

Standard form::

    minimize    c @ x + offset
    subject to  b - A @ x  in  K = K_1 x ... x K_p

Each constraint block carries its own rows of ``A``, offset ``b`` and cone
tag. Variable bounds are kept separately and turned into nonnegative rows
when the program is stacked for the solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .cones import NONNEG, PSD, Cone, SQRT2, _tril_index

SCHEMA_VERSION = 1


class Expr:
    """Sparse affine expression ``sum(coef[i] * x[i]) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const: float = 0.0):
        self.terms: dict[int, float] = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def var(cls, index, coef: float = 1.0) -> "Expr":
        return cls({int(index): float(coef)})

    @classmethod
    def constant(cls, value: float) -> "Expr":
        return cls(None, value)

    @classmethod
    def dot(cls, indices, coefs) -> "Expr":
        out = cls()
        for i, a in zip(np.ravel(indices), np.ravel(coefs)):
            if a != 0.0:
                out.terms[int(i)] = out.terms.get(int(i), 0.0) + float(a)
        return out

    @classmethod
    def total(cls, items: Iterable["Expr"]) -> "Expr":
        out = cls()
        for e in items:
            out.iadd(e)
        return out

    def iadd(self, other, scale: float = 1.0) -> "Expr":
        if isinstance(other, Expr):
            for k, v in other.terms.items():
                self.terms[k] = self.terms.get(k, 0.0) + scale * v
            self.const += scale * other.const
        else:
            self.const += scale * float(other)
        return self

    def copy(self) -> "Expr":
        return Expr(self.terms, self.const)

    def __add__(self, other):
        return self.copy().iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy().iadd(other, -1.0)

    def __rsub__(self, other):
        return (-self).iadd(other)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, scalar):
        scalar = float(scalar)
        return Expr({k: v * scalar for k, v in self.terms.items()}, self.const * scalar)

    __rmul__ = __mul__

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(v * x[k] for k, v in self.terms.items())

    def __repr__(self):
        return f"Expr({len(self.terms)} terms, const={self.const:g})"


@dataclass
class ConstraintBlock:
    name: str
    cone: Cone
    A: sp.csr_matrix
    b: np.ndarray

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.cone.rows or self.b.size != self.cone.rows:
            raise ValueError(
                f"block {self.name!r}: {self.A.shape[0]} rows / {self.b.size} offsets "
                f"for a cone of {self.cone.rows} rows"
            )


@dataclass
class ConicProgram:
    c: np.ndarray
    blocks: list[ConstraintBlock]
    var_index: dict[str, np.ndarray] = field(default_factory=dict)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        for blk in self.blocks:
            if blk.A.shape[1] != n:
                raise ValueError(f"block {blk.name!r} has {blk.A.shape[1]} columns, expected {n}")

    @property
    def n(self) -> int:
        return self.c.size

    def stack(self):
        """Return ``(A, b, cones, names)`` with variable bounds appended."""
        mats = [blk.A for blk in self.blocks]
        offs = [blk.b for blk in self.blocks]
        cones = [blk.cone for blk in self.blocks]
        names = [blk.name for blk in self.blocks]
        eye = sp.identity(self.n, format="csr")
        if self.lb is not None:
            idx = np.flatnonzero(np.isfinite(self.lb))
            if idx.size:
                # x - lb >= 0  ->  b - A x = -lb + x
                mats.append(-eye[idx])
                offs.append(-self.lb[idx])
                cones.append(Cone(NONNEG, idx.size))
                names.append("bounds:lower")
        if self.ub is not None:
            idx = np.flatnonzero(np.isfinite(self.ub))
            if idx.size:
                mats.append(eye[idx])
                offs.append(self.ub[idx])
                cones.append(Cone(NONNEG, idx.size))
                names.append("bounds:upper")
        if mats:
            A = sp.vstack(mats, format="csr")
            b = np.concatenate(offs)
        else:
            A = sp.csr_matrix((0, self.n))
            b = np.zeros(0)
        return A, b, cones, names

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.offset)

    def value(self, name: str, x: np.ndarray) -> np.ndarray:
        return x[self.var_index[name]]

    def to_dict(self) -> dict:
        A, b, cones, names = self.stack()
        A = A.tocoo()
        return {
            "schema": SCHEMA_VERSION,
            "n": self.n,
            "c": self.c.tolist(),
            "offset": self.offset,
            "A": {"shape": list(A.shape), "row": A.row.tolist(), "col": A.col.tolist(), "data": A.data.tolist()},
            "b": b.tolist(),
            "cones": [dict(cone.to_dict(), name=name) for cone, name in zip(cones, names)],
            "variables": {k: np.asarray(v).tolist() for k, v in self.var_index.items()},
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, data: dict) -> "ConicProgram":
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported program schema {data.get('schema')!r}")
        a = data["A"]
        A = sp.csr_matrix((a["data"], (a["row"], a["col"])), shape=tuple(a["shape"]))
        b = np.asarray(data["b"], dtype=float)
        blocks = []
        offset = 0
        for entry in data["cones"]:
            cone = Cone(entry["kind"], entry["size"])
            sl = slice(offset, offset + cone.rows)
            blocks.append(ConstraintBlock(entry.get("name", ""), cone, A[sl], b[sl]))
            offset += cone.rows
        variables = {k: np.asarray(v, dtype=int) for k, v in data.get("variables", {}).items()}
        return cls(np.asarray(data["c"], dtype=float), blocks, variables, offset=data.get("offset", 0.0))

    @classmethod
    def load(cls, path) -> "ConicProgram":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class ProgramBuilder:
    """Incrementally assemble a :class:`ConicProgram` from affine expressions."""

    def __init__(self):
        self.n = 0
        self.var_index: dict[str, np.ndarray] = {}
        self._blocks: list[tuple[str, Cone, list[Expr]]] = []
        self._objective = Expr()

    def add_variable(self, name: str, shape=()) -> np.ndarray:
        if name in self.var_index:
            raise ValueError(f"variable {name!r} already defined")
        size = int(np.prod(shape)) if shape != () else 1
        idx = np.arange(self.n, self.n + size).reshape(shape) if shape != () else np.array(self.n)
        self.n += size
        self.var_index[name] = idx
        return idx

    def add_constraint(self, name: str, kind: str, exprs: list[Expr], size: int | None = None) -> None:
        """Constrain the stacked expressions to lie in a cone of ``kind``."""
        exprs = list(exprs)
        if not exprs:
            return
        if kind == PSD:
            cone = Cone(PSD, size)
        else:
            cone = Cone(kind, len(exprs))
        if cone.rows != len(exprs):
            raise ValueError(f"{name}: {len(exprs)} expressions for {cone.rows} cone rows")
        self._blocks.append((name, cone, exprs))

    def add_psd(self, name: str, matrix: list[list[Expr]]) -> None:
        """Constrain a symmetric matrix of expressions (lower triangle read) to be PSD."""
        m = len(matrix)
        rows, cols, _ = _tril_index(m)
        exprs = []
        for i, j in zip(rows, cols):
            e = matrix[i][j]
            exprs.append(e if i == j else e * SQRT2)
        self.add_constraint(name, PSD, exprs, size=m)

    def add_objective(self, expr: Expr) -> None:
        self._objective.iadd(expr)

    def build(self) -> ConicProgram:
        c = np.zeros(self.n)
        for k, v in self._objective.terms.items():
            c[k] += v
        blocks = []
        for name, cone, exprs in self._blocks:
            rows, cols, vals = [], [], []
            b = np.empty(len(exprs))
            for r, e in enumerate(exprs):
                # s = e = const + a x  ->  b - A x with b = const, A = -a
                b[r] = e.const
                for k, v in e.terms.items():
                    rows.append(r)
                    cols.append(k)
                    vals.append(-v)
            A = sp.csr_matrix((vals, (rows, cols)), shape=(len(exprs), self.n))
            blocks.append(ConstraintBlock(name, cone, A, b))
        return ConicProgram(c, blocks, dict(self.var_index), offset=self._objective.const)
