"""Experiment drivers: scalar cost sweeps and nested patch refinement."""
from dataclasses import dataclass

import numpy as np

from .metrics import psnr, ssim
from .params import ParamField
from .trust_region import TRConfig, run


def scalar_sweep(evaluator, grid):
    """``[(alpha, cost)]`` over ``grid`` (sorted), with warm starts."""
    return [(float(a), evaluator.cost(float(a))) for a in np.sort(np.asarray(grid, float))]


@dataclass
class StageResult:
    """Outcome of one trust-region run in a refinement sequence."""

    field: ParamField
    iterations: int
    step_norm: float
    start_cost: float
    cost: float
    ssim: float
    psnr: float
    trace: list

    @property
    def label(self):
        return self.field.describe()


def quality(evaluation, pairs):
    """Mean SSIM and PSNR of the lower-level solutions against the clean images."""
    s = [ssim(sol.u.reshape(p.shape), p.clean) for sol, p in zip(evaluation.solutions, pairs)]
    q = [psnr(sol.u.reshape(p.shape), p.clean) for sol, p in zip(evaluation.solutions, pairs)]
    return float(np.mean(s)), float(np.mean(q))


def nested_refinement(evaluator, levels=((1, 1), (2, 2), (4, 4), (8, 8)), alpha0=0.01,
                      config=None, callback=None):
    """Train on successively finer patch grids, each started from the last optimum.

    Every stage starts from the previous optimum expressed on the finer
    grid (same lifted field, hence the same cost), so final costs are
    nonincreasing across stages whenever each run only accepts decreasing
    steps.
    """
    config = config or TRConfig()
    shape = evaluator.shape
    p1, p2 = levels[0]
    field = ParamField.patch(shape, p1, p2, alpha0) if (p1, p2) != (1, 1) else \
        ParamField.scalar(shape, alpha0)
    stages = []
    for k, (p1, p2) in enumerate(levels):
        if k > 0:
            field = field.refine(p1, p2)
        start = evaluator.cost(field)
        result = run(evaluator, field, config)
        field = result.alpha[0]
        s, q = quality(result.evaluation, evaluator.pairs)
        stages.append(StageResult(field, result.iterations, result.final_step_norm(), start,
                                  result.cost, s, q, result.trace))
        if callback is not None:
            callback(stages[-1])
    return stages
