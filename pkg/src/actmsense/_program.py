"""Symbolic expansion of nested ``min`` expressions into linear + |.| parts.

Every ``min(a, b)`` is rewritten as ``(a + b - |a - b|) / 2``. An expression
is kept as an affine combination of states, inputs and *atoms*, where an
atom is ``scale * |inner|`` for some (possibly nested) inner expression.
Expanding a state update this way yields one row of ``A``, ``B_u``, a
constant, and coefficients on atoms: exactly the ``x+ = A x + G f + B_u u``
split, with ``f`` made of atom values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

TIE_TOL = 1e-12


class Expr:
    """Affine expression over keys ``('x', j)``, ``('u', j)``, ``('a', k)``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms: dict[tuple[str, int], float] = dict(terms or {})
        self.const = float(const)

    @classmethod
    def state(cls, j: int, c: float = 1.0) -> "Expr":
        return cls({("x", j): c})

    @classmethod
    def input(cls, j: int, c: float = 1.0) -> "Expr":
        return cls({("u", j): c})

    @classmethod
    def constant(cls, c: float) -> "Expr":
        return cls(const=c)

    def __add__(self, other):
        if not isinstance(other, Expr):
            return Expr(self.terms, self.const + float(other))
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return Expr(out, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Expr) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c):
        c = float(c)
        return Expr({k: v * c for k, v in self.terms.items()}, self.const * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def cleaned(self, tol=1e-15) -> "Expr":
        scale = max([abs(v) for v in self.terms.values()] + [abs(self.const), 1.0])
        return Expr({k: v for k, v in self.terms.items() if abs(v) > tol * scale}, self.const)

    def key(self):
        e = self.cleaned()
        items = sorted((k, round(v, 14)) for k, v in e.terms.items())
        return tuple(items), round(e.const, 14)


@dataclass
class Atom:
    inner: Expr
    scale: float
    label: str
    depth: int


class AtomTable:
    """Registry of unique atoms; identical inner expressions share one atom."""

    def __init__(self):
        self.atoms: list[Atom] = []
        self._index: dict = {}

    def abs_(self, inner: Expr, scale: float, label: str) -> Expr:
        """Return ``|inner|`` as an expression ``(1/scale) * atom``."""
        inner = inner.cleaned()
        pos, neg = inner.key(), (-inner).key()
        if pos in self._index:
            k = self._index[pos]
        elif neg in self._index:
            k = self._index[neg]
        else:
            depth = 1 + max(
                [self.atoms[j].depth for (t, j) in inner.terms if t == "a"], default=0
            )
            k = len(self.atoms)
            self.atoms.append(Atom(inner, float(scale), label, depth))
            self._index[pos] = k
        return Expr({("a", k): 1.0 / self.atoms[k].scale})

    def min_(self, a: Expr, b: Expr, scale: float, label: str) -> Expr:
        return (a + b - self.abs_(a - b, scale, label)) * 0.5


@dataclass
class Program:
    """Compiled atom DAG for fast numeric evaluation.

    Atom ``k`` has value ``scale[k] * |const[k] + sum coef * v[idx]|`` where
    ``v = [x, u, atoms]``. Atoms are topologically ordered.
    """

    n: int
    m: int
    K: int
    indptr: np.ndarray
    idx: np.ndarray
    coef: np.ndarray
    const: np.ndarray
    scale: np.ndarray
    depth: np.ndarray
    labels: list

    @classmethod
    def from_table(cls, table: AtomTable, n: int, m: int) -> "Program":
        indptr, idx, coef = [0], [], []
        off = {"x": 0, "u": n, "a": n + m}
        for atom in table.atoms:
            for (t, j), c in sorted(atom.inner.terms.items()):
                idx.append(off[t] + j)
                coef.append(c)
            indptr.append(len(idx))
        return cls(
            n=n, m=m, K=len(table.atoms),
            indptr=np.asarray(indptr, dtype=np.int64),
            idx=np.asarray(idx, dtype=np.int64),
            coef=np.asarray(coef, dtype=float),
            const=np.asarray([a.inner.const for a in table.atoms], dtype=float),
            scale=np.asarray([a.scale for a in table.atoms], dtype=float),
            depth=np.asarray([a.depth for a in table.atoms], dtype=np.int64),
            labels=[a.label for a in table.atoms],
        )


def split_row(expr: Expr, n: int, m: int):
    """Split an expanded update into (A row, B row, constant, {atom: coef})."""
    a_row = np.zeros(n)
    b_row = np.zeros(m)
    atoms: dict[int, float] = {}
    for (t, j), c in expr.cleaned().terms.items():
        if t == "x":
            a_row[j] += c
        elif t == "u":
            b_row[j] += c
        else:
            atoms[j] = atoms.get(j, 0.0) + c
    return a_row, b_row, expr.const, atoms


def iter_nonzero(atoms: dict[int, float], tol=1e-14) -> Iterable[tuple[int, float]]:
    scale = max([abs(v) for v in atoms.values()] + [1.0])
    for k in sorted(atoms):
        if abs(atoms[k]) > tol * scale:
            yield k, atoms[k]
