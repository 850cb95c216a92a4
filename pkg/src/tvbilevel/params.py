"""Regularization parameter fields and their lift to pixels.

A parameter field stores ``p`` nonnegative degrees of freedom and a
piecewise-constant map ``P`` onto the ``n`` gradient rows of an
``m1 x m2`` grid. The map is scalar (p = 1), a patch grid (p = p1*p2)
or per pixel (p = n).
"""
import re
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidParam, ShapeMismatch

KINDS = ("scalar", "patch", "perpixel")


def patch_labels(m1, m2, p1, p2):
    """Cell index of every pixel for a ``p1 x p2`` floor partition.

    Cell ``(a, b)`` covers rows ``floor(a*m1/p1) .. floor((a+1)*m1/p1)-1``
    and the analogous columns. Labels are row-major over cells.
    """
    if not (1 <= p1 <= m1 and 1 <= p2 <= m2):
        raise InvalidParam(f"patch grid {p1}x{p2} does not fit a {m1}x{m2} image")
    rows = np.searchsorted((np.arange(p1) * m1) // p1, np.arange(m1), side="right") - 1
    cols = np.searchsorted((np.arange(p2) * m2) // p2, np.arange(m2), side="right") - 1
    return (rows[:, None] * p2 + cols[None, :]).ravel()


@dataclass(frozen=True)
class ParamField:
    """Nonnegative dofs plus a piecewise-constant map onto the grid.

    Parameters
    ----------
    kind : {"scalar", "patch", "perpixel"}
    shape : tuple
        Image shape ``(m1, m2)``.
    dofs : ndarray
        Length-p parameter vector.
    cells : tuple
        ``(p1, p2)`` for the patch kind; ``(1, 1)`` for scalar and
        ``shape`` for per-pixel fields.
    """

    kind: str
    shape: tuple
    dofs: np.ndarray
    cells: tuple = (1, 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParam(f"unknown parameter kind {self.kind!r}")
        m1, m2 = self.shape
        if self.kind == "scalar":
            cells = (1, 1)
        elif self.kind == "perpixel":
            cells = (m1, m2)
        else:
            cells = tuple(int(c) for c in self.cells)
        object.__setattr__(self, "cells", cells)
        dofs = np.array(self.dofs, dtype=float).ravel()
        if dofs.size != cells[0] * cells[1]:
            raise ShapeMismatch(f"{self.kind} field on {cells} cells needs "
                                f"{cells[0] * cells[1]} dofs, got {dofs.size}")
        if not np.all(np.isfinite(dofs)):
            raise InvalidParam("parameter dofs must be finite")
        if np.any(dofs < 0):
            raise InvalidParam(f"parameter dofs must be nonnegative (min {dofs.min():.3e})")
        dofs.setflags(write=False)
        object.__setattr__(self, "dofs", dofs)

    @classmethod
    def scalar(cls, shape, value):
        return cls("scalar", tuple(shape), [value])

    @classmethod
    def patch(cls, shape, p1, p2, values):
        values = np.broadcast_to(np.asarray(values, dtype=float), (p1 * p2,))
        return cls("patch", tuple(shape), values, (p1, p2))

    @classmethod
    def perpixel(cls, shape, values):
        m = shape[0] * shape[1]
        return cls("perpixel", tuple(shape), np.broadcast_to(np.asarray(values, float), (m,)))

    @property
    def p(self):
        return self.dofs.size

    @property
    def labels(self):
        """Cell index of each pixel (row-major)."""
        m1, m2 = self.shape
        if self.kind == "perpixel":
            return np.arange(m1 * m2)
        return patch_labels(m1, m2, *self.cells)

    def with_dofs(self, dofs):
        return ParamField(self.kind, self.shape, dofs, self.cells)

    def lift(self):
        """Per-pixel parameter ``P @ dofs``."""
        return self.dofs[self.labels]

    def aggregate(self, g_pixel):
        """Adjoint map ``P^T g`` of a per-pixel vector."""
        g = np.asarray(g_pixel, dtype=float).ravel()
        m1, m2 = self.shape
        if g.size != m1 * m2:
            raise ShapeMismatch(f"per-pixel vector of size {g.size} does not match {self.shape}")
        return np.bincount(self.labels, weights=g, minlength=self.p)

    def refine(self, p1, p2):
        """Express this field on a finer patch grid, keeping its lift.

        Exact when every new cell lies inside one old cell, as for nested
        power-of-two grids; otherwise a new cell straddling several old
        cells takes the mean of the lifted field over its pixels.
        """
        m1, m2 = self.shape
        labels = patch_labels(m1, m2, p1, p2)
        lifted = self.lift()
        counts = np.bincount(labels, minlength=p1 * p2)
        values = np.bincount(labels, weights=lifted, minlength=p1 * p2) / counts
        # cells inside a single old cell copy its value exactly
        lo = np.full(p1 * p2, np.inf)
        hi = np.full(p1 * p2, -np.inf)
        np.minimum.at(lo, labels, lifted)
        np.maximum.at(hi, labels, lifted)
        flat = lo == hi
        values[flat] = lo[flat]
        return ParamField.patch(self.shape, p1, p2, values)

    def describe(self):
        if self.kind == "patch":
            return f"patch {self.cells[0]} {self.cells[1]}"
        return self.kind


def make_patch_map(m1, m2, p1, p2):
    """Zero-valued patch template of ``p1 x p2`` cells on an ``m1 x m2`` grid."""
    patch_labels(m1, m2, p1, p2)
    return ParamField.patch((m1, m2), p1, p2, 0.0)


def lift(param):
    return param.lift()


def aggregate(g_pixel, param):
    return param.aggregate(g_pixel)


def parse_kind(text, shape):
    """Template field from ``"scalar"``, ``"perpixel"`` or ``"patch p1 p2"``."""
    parts = re.sub(r"(?<=\d)x(?=\d)", " ", str(text).strip()).split()
    if not parts:
        raise InvalidParam("empty parameter kind")
    head = parts[0].lower()
    if head == "scalar" and len(parts) == 1:
        return ParamField.scalar(shape, 0.0)
    if head == "perpixel" and len(parts) == 1:
        return ParamField.perpixel(shape, 0.0)
    if head == "patch" and len(parts) == 3:
        try:
            p1, p2 = int(parts[1]), int(parts[2])
        except ValueError:
            raise InvalidParam(f"bad patch size in {text!r}") from None
        return make_patch_map(shape[0], shape[1], p1, p2)
    raise InvalidParam(f"cannot parse parameter kind {text!r}")


def format_field(param):
    """Text serialization: header line then one dof per line, full precision."""
    m1, m2 = param.shape
    p1, p2 = param.cells
    lines = [f"{param.kind} {m1} {m2} {p1} {p2}"]
    lines += [repr(float(v)) for v in param.dofs]
    return "\n".join(lines) + "\n"


def parse_field(text):
    """Inverse of :func:`format_field`."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise InvalidParam("empty parameter file")
    head = lines[0].split()
    if len(head) != 5:
        raise InvalidParam(f"bad parameter header {lines[0]!r}")
    kind = head[0]
    try:
        m1, m2, p1, p2 = (int(x) for x in head[1:])
        dofs = [float(x) for x in lines[1:]]
    except ValueError as exc:
        raise InvalidParam(f"bad parameter file: {exc}") from None
    return ParamField(kind, (m1, m2), dofs, (p1, p2))
