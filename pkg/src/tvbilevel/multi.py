"""Several difference schemes, each with its own learned parameter field.

The lower-level energy becomes

    1/2 |u - f|^2 + sum_i sum_j alpha^i_j |(K_i u)_j|

with, by default, forward, backward and centered gradients. All terms
share one adjoint solve per pair on the intersection of the per-term
subspaces; gradients are concatenated in term order.
"""
from dataclasses import dataclass, field

import numpy as np

from .denoise import DenoiseProblem
from .exceptions import InvalidParam, ShapeMismatch
from .gradient import Evaluator, SolverOptions
from .grid import Scheme, make_gradient_operator
from .params import ParamField

DEFAULT_SCHEMES = (Scheme.FORWARD, Scheme.BACKWARD, Scheme.CENTERED)


@dataclass
class MultiTermSpec:
    """Ordered schemes with one parameter field each.

    With ``shared_kind`` every field must use the same parameter map
    (kind and cell grid); the values may still differ.
    """

    schemes: list = field(default_factory=lambda: list(DEFAULT_SCHEMES))
    params: list = None
    shared_kind: bool = False

    def __post_init__(self):
        self.schemes = [Scheme.parse(s) for s in self.schemes]
        if not self.schemes:
            raise InvalidParam("a multi-term spec needs at least one scheme")
        if self.params is None:
            raise InvalidParam("parameter fields are required")
        self.params = list(self.params)
        if len(self.params) != len(self.schemes):
            raise ShapeMismatch(f"{len(self.schemes)} schemes but {len(self.params)} fields")
        shapes = {tuple(p.shape) for p in self.params}
        if len(shapes) != 1:
            raise ShapeMismatch("parameter fields live on different grids")
        if self.shared_kind and len({(p.kind, p.cells) for p in self.params}) != 1:
            raise InvalidParam("shared_kind requires identical parameter maps")

    @property
    def shape(self):
        return tuple(self.params[0].shape)

    @classmethod
    def uniform(cls, shape, values, schemes=DEFAULT_SCHEMES, kind="scalar", cells=(1, 1)):
        """Spec with every term on the same map, filled with ``values[i]``."""
        params = []
        for v in values:
            if kind == "scalar":
                params.append(ParamField.scalar(shape, v))
            elif kind == "patch":
                params.append(ParamField.patch(shape, cells[0], cells[1], v))
            else:
                params.append(ParamField.perpixel(shape, v))
        return cls(list(schemes), params, shared_kind=True)

    def with_params(self, params):
        return MultiTermSpec(self.schemes, params, self.shared_kind)


def build_multi_problem(f, spec):
    """Lower-level problem with one term per scheme of ``spec``."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[None, :]
    if f.shape != spec.shape:
        raise ShapeMismatch(f"datum {f.shape} does not match parameter grid {spec.shape}")
    terms = [(make_gradient_operator(f.shape[0], f.shape[1], s), pf.lift())
             for s, pf in zip(spec.schemes, spec.params)]
    return DenoiseProblem(f, terms)


def multi_evaluator(spec, dataset, options=None, warm_start=True):
    return Evaluator(dataset, spec.schemes, options or SolverOptions(), warm_start)


def multi_gradient(spec, dataset, phase="bouligand", gamma=1e3, evaluator=None):
    """``(cost, gradient)`` with gradient blocks concatenated in spec order.

    ``phase`` is ``"bouligand"`` or ``"huber"``. The Bouligand phase raises
    AssumptionViolated when the intersected subspace degenerates.
    """
    ev = evaluator or multi_evaluator(spec, dataset)
    if phase == "bouligand":
        out = ev.bouligand(spec.params)
    elif phase in ("huber", "regularized"):
        out = ev.huber(spec.params, gamma)
    else:
        raise InvalidParam(f"unknown gradient phase {phase!r}")
    return out.cost, out.gradient


def split_gradient(spec, gradient):
    """Per-term blocks of a concatenated gradient."""
    out, pos = [], 0
    for pf in spec.params:
        out.append(np.asarray(gradient[pos:pos + pf.p]))
        pos += pf.p
    return out
