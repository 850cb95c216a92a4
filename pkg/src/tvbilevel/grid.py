"""Discrete gradient operators on rectangular pixel grids.

Images are stored row-major: pixel ``(r, c)`` of an ``m1 x m2`` image is
entry ``r * m2 + c`` of the flattened vector. The x component of a
gradient row differentiates along columns, the y component along rows.
All schemes use zero-difference (Neumann) boundary rows, so there is
exactly one gradient row per pixel and constants lie in the kernel.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import kernels
from .exceptions import InvalidParam, ShapeMismatch


class Scheme(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    CENTERED = "centered"

    @property
    def code(self):
        return _CODES[self]

    @classmethod
    def parse(cls, value):
        if isinstance(value, Scheme):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidParam(f"unknown finite-difference scheme {value!r}") from None


_CODES = {Scheme.FORWARD: kernels.FORWARD, Scheme.BACKWARD: kernels.BACKWARD,
          Scheme.CENTERED: kernels.CENTERED}


def _difference_matrix(length, scheme):
    """1-D difference matrix (length x length) with zero boundary rows."""
    if scheme is Scheme.FORWARD:
        rows = np.arange(length - 1)
        data = np.concatenate([-np.ones(length - 1), np.ones(length - 1)])
        cols = np.concatenate([rows, rows + 1])
        rows = np.concatenate([rows, rows])
    elif scheme is Scheme.BACKWARD:
        rows = np.arange(1, length)
        data = np.concatenate([np.ones(length - 1), -np.ones(length - 1)])
        cols = np.concatenate([rows, rows - 1])
        rows = np.concatenate([rows, rows])
    else:
        rows = np.arange(1, length - 1)
        half = 0.5 * np.ones(max(length - 2, 0))
        data = np.concatenate([half, -half])
        cols = np.concatenate([rows + 1, rows - 1])
        rows = np.concatenate([rows, rows])
    return sp.csr_matrix((data, (rows, cols)), shape=(length, length))


@dataclass(frozen=True, eq=False)
class GradientOperator:
    """Sparse discrete gradient ``K = (K_x, K_y)`` for one scheme.

    ``kx`` and ``ky`` are ``m x m`` CSR matrices; ``matrix`` stacks them
    as ``[K_x; K_y]`` (shape ``2m x m``).
    """

    m1: int
    m2: int
    scheme: Scheme
    kx: sp.csr_matrix = field(repr=False)
    ky: sp.csr_matrix = field(repr=False)
    boundary: str = "neumann-zero"

    @property
    def m(self):
        return self.m1 * self.m2

    @property
    def n(self):
        return self.m1 * self.m2

    @property
    def shape(self):
        return (self.m1, self.m2)

    @property
    def matrix(self):
        return sp.vstack([self.kx, self.ky]).tocsr()

    def row_block(self, j):
        """The 2 x m block ``K_j`` producing gradient row ``j``."""
        return sp.vstack([self.kx[j], self.ky[j]]).tocsr()

    def __call__(self, u):
        return apply_K(self, u)


def make_gradient_operator(m1, m2, scheme=Scheme.FORWARD):
    m1, m2 = int(m1), int(m2)
    if m1 < 1 or m2 < 1:
        raise ShapeMismatch(f"grid shape must be positive, got {m1}x{m2}")
    scheme = Scheme.parse(scheme)
    dx = _difference_matrix(m2, scheme)
    dy = _difference_matrix(m1, scheme)
    kx = sp.kron(sp.identity(m1, format="csr"), dx, format="csr")
    ky = sp.kron(dy, sp.identity(m2, format="csr"), format="csr")
    kx.eliminate_zeros()
    ky.eliminate_zeros()
    return GradientOperator(m1, m2, scheme, kx, ky)


def _as_image(op, u):
    u = np.asarray(u, dtype=float)
    if u.size != op.m:
        raise ShapeMismatch(f"image of size {u.size} does not match {op.m1}x{op.m2} grid")
    return np.ascontiguousarray(u.reshape(op.m1, op.m2))


def apply_K(op, u):
    """Gradient field ``K u`` as an ``(n, 2)`` array."""
    img = _as_image(op, u)
    out = np.empty((op.m1, op.m2, 2))
    kernels.grad(img, op.scheme.code, out)
    return out.reshape(op.n, 2)


def apply_KT(op, q):
    """Adjoint ``K^T q`` as a flat length-m vector."""
    q = np.asarray(q, dtype=float)
    if q.size != 2 * op.n:
        raise ShapeMismatch(f"gradient field of size {q.size} does not match n={op.n}")
    q = np.ascontiguousarray(q.reshape(op.m1, op.m2, 2))
    out = np.empty((op.m1, op.m2))
    kernels.grad_adjoint(q, op.scheme.code, out)
    return out.ravel()


def row_norms(field):
    field = np.asarray(field).reshape(-1, 2)
    return np.hypot(field[:, 0], field[:, 1])


_START_VECTORS = {}


def operator_norm_estimate(op, iters=100):
    """Power-method estimate of the spectral norm of ``K`` (stacked, 2m x m).

    The start vector is fixed per grid size, so the estimate is
    nondecreasing in ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    ops = op if isinstance(op, (list, tuple)) else [op]
    m = ops[0].m
    key = m
    if key not in _START_VECTORS:
        _START_VECTORS[key] = np.random.default_rng(12345).standard_normal(m)
    x = _START_VECTORS[key].copy()
    est = 0.0
    for _ in range(iters):
        nx = np.linalg.norm(x)
        if nx == 0.0:
            return 0.0
        x /= nx
        kx = [apply_K(o, x) for o in ops]
        est = sum(float(np.sum(g * g)) for g in kx)
        x = sum(apply_KT(o, g) for o, g in zip(ops, kx))
    return float(np.sqrt(est))


def stacked_norm(ops):
    """Exact spectral norm of one or more stacked operators on a common grid.

    ``sum_i K_i^T K_i`` is a Kronecker sum of 1-D blocks, so its top
    eigenvalue is the sum of two small dense eigenvalue problems.
    """
    ops = ops if isinstance(ops, (list, tuple)) else [ops]
    m1, m2 = ops[0].shape
    lam = 0.0
    for length in (m2, m1):
        gram = np.zeros((length, length))
        for o in ops:
            d = _difference_matrix(length, o.scheme).toarray()
            gram += d.T @ d
        lam += float(np.linalg.eigvalsh(gram)[-1]) if length > 0 else 0.0
    return float(np.sqrt(max(lam, 0.0)))
