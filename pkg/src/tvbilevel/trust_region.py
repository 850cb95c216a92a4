"""Two-phase nonsmooth trust-region method for the learning problem.

Large radii use the Bouligand-candidate gradient; once the radius drops
below a threshold the Huber-regularized gradient takes over. Steps come
from a dogleg on the box ``{s : alpha + s >= 0, |s|_inf <= delta}`` with
an L-BFGS model Hessian.
"""
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import AssumptionViolated, InvalidParam, MaxIterations

BOULIGAND = "bouligand"
REGULARIZED = "regularized"

TRACE_COLUMNS = ("k", "phase", "cost", "grad_norm", "delta", "rho", "accepted", "step_norm")


@dataclass
class TRConfig:
    delta0: float = 1.0
    eta1: float = 0.1
    eta2: float = 0.75
    gamma1: float = 0.25
    gamma2: float = 0.5
    delta_t: float = 1e-3
    tol: float = 1e-6
    max_iter: int = 200
    lbfgs_memory: int = 10
    delta_max: float = 1e3
    huber_gamma: float = 1e3
    grow_factor: float = 2.0
    clear_memory_on_switch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.eta1 <= self.eta2 < 1:
            raise InvalidParam("need 0 < eta1 <= eta2 < 1")
        if not 0 < self.gamma1 <= self.gamma2 < 1:
            raise InvalidParam("need 0 < gamma1 <= gamma2 < 1")
        if not 0 < self.tol < self.delta_t <= self.delta0 <= self.delta_max:
            raise InvalidParam("need 0 < tol < delta_t <= delta0 <= delta_max")
        if int(self.max_iter) < 1 or int(self.lbfgs_memory) < 1:
            raise InvalidParam("max_iter and lbfgs_memory must be positive")
        if not self.huber_gamma > 0:
            raise InvalidParam("huber_gamma must be positive")
        if not self.grow_factor >= 1:
            raise InvalidParam("grow_factor must be at least 1")
        return self


# ---------------------------------------------------------------------------
# L-BFGS


class LBFGSMemory:
    """Curvature pairs ``(s, y)`` defining a limited-memory BFGS matrix.

    The seed matrix is ``B_0 = I / theta`` with ``theta = <s, y>/<y, y>`` of
    the newest pair (identity when empty), shared by the inverse two-loop
    recursion and the compact-form product so that the two are exact
    inverses of each other.
    """

    def __init__(self, size=10):
        self.size = int(size)
        self.s = []
        self.y = []

    def __len__(self):
        return len(self.s)

    def clear(self):
        self.s.clear()
        self.y.clear()

    def update(self, s, y):
        """Store a pair; returns False (and skips) when curvature is too weak."""
        s = np.asarray(s, dtype=float).copy()
        y = np.asarray(y, dtype=float).copy()
        sy = float(np.dot(s, y))
        if not sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.size:
            self.s.pop(0)
            self.y.pop(0)
        return True

    @property
    def theta(self):
        if not self.s:
            return 1.0
        s, y = self.s[-1], self.y[-1]
        return float(np.dot(s, y) / np.dot(y, y))

    def apply_inverse(self, v):
        """``B^{-1} v`` by the two-loop recursion."""
        q = np.array(v, dtype=float)
        rhos = [1.0 / float(np.dot(s, y)) for s, y in zip(self.s, self.y)]
        alphas = []
        for s, y, rho in reversed(list(zip(self.s, self.y, rhos))):
            a = rho * float(np.dot(s, q))
            alphas.append(a)
            q -= a * y
        r = self.theta * q
        for (s, y, rho), a in zip(zip(self.s, self.y, rhos), reversed(alphas)):
            b = rho * float(np.dot(y, r))
            r += (a - b) * s
        return r

    def apply(self, v):
        """``B v`` from the compact representation."""
        v = np.asarray(v, dtype=float)
        b0 = 1.0 / self.theta
        if not self.s:
            return b0 * v
        S = np.column_stack(self.s)
        Y = np.column_stack(self.y)
        sy = S.T @ Y
        L = np.tril(sy, -1)
        D = np.diag(np.diag(sy))
        mid = np.block([[b0 * (S.T @ S), L], [L.T, -D]])
        W = np.hstack([b0 * S, Y])
        return b0 * v - W @ np.linalg.solve(mid, W.T @ v)

    def dense(self, p):
        """Explicit ``p x p`` matrix (for tests and small problems)."""
        return np.column_stack([self.apply(e) for e in np.eye(p)])


def lbfgs_apply(memory, v):
    return memory.apply_inverse(v)


def lbfgs_model_hvp(memory, v):
    return memory.apply(v)


def lbfgs_update(memory, s, y):
    return memory.update(s, y)


# ---------------------------------------------------------------------------
# subproblem


def _box(alpha, delta):
    lo = np.maximum(-np.asarray(alpha, float), -delta)
    hi = np.full_like(lo, float(delta))
    return lo, hi


def _inside(s, lo, hi, slack=0.0):
    return bool(np.all(s >= lo - slack) and np.all(s <= hi + slack))


def _max_step(x0, d, lo, hi):
    """Largest ``t >= 0`` with ``lo <= x0 + t d <= hi``."""
    t = np.inf
    pos, neg = d > 0, d < 0
    if np.any(pos):
        t = min(t, float(np.min((hi[pos] - x0[pos]) / d[pos])))
    if np.any(neg):
        t = min(t, float(np.min((lo[neg] - x0[neg]) / d[neg])))
    return max(t, 0.0)


def model_value(g, memory, s):
    return float(np.dot(g, s) + 0.5 * np.dot(s, memory.apply(s)))


@dataclass
class DoglegInfo:
    case: str
    fixed: int = 0
    degenerate: bool = False


def dogleg_step(g, memory, delta, alpha, fix_tol=1e-3, return_info=False):
    """Dogleg step on ``{s : max(-alpha_j, -delta) <= s_j <= delta}``.

    Newton point if feasible; otherwise the furthest feasible point on the
    segment from the Cauchy point to the Newton point; otherwise the longest
    feasible multiple of the Cauchy direction.

    Coordinates already at their bound (``alpha_j <= fix_tol * delta``)
    whose gradient pushes outward are moved onto the bound and excluded
    from the dogleg, so that a single blocked coordinate cannot stall the
    Cauchy direction.
    """
    g = np.asarray(g, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if not delta > 0:
        raise InvalidParam("trust-region radius must be positive")
    lo, hi = _box(alpha, delta)
    fixed = (alpha <= fix_tol * delta) & (g > 0)
    s = np.zeros_like(g)
    s[fixed] = -alpha[fixed]
    free = ~fixed
    info = DoglegInfo("zero", int(fixed.sum()))
    gf = np.where(free, g, 0.0)
    if fixed.any():
        # model gradient at the bound-projected point, restricted to the free set
        gf = np.where(free, g + memory.apply(s), 0.0)
    gnorm = float(np.linalg.norm(gf))
    if gnorm == 0.0:
        return (s, info) if return_info else s

    def restrict(v):
        return np.where(free, v, 0.0)

    def hess(v):
        return restrict(memory.apply(restrict(v)))

    if fixed.any():
        s_n = restrict(_free_newton(memory, gf, free))
    else:
        s_n = -memory.apply_inverse(gf)
    if _inside(s + s_n, lo, hi):
        info.case = "newton"
        out = s + s_n
        return (out, info) if return_info else out
    curv = float(np.dot(gf, hess(gf)))
    if curv <= 0:
        info.degenerate = True
        d = -gf / gnorm
        t = _max_step(s, d, lo, hi)
        info.case = "steepest"
        out = s + t * d
        return (out, info) if return_info else out
    s_c = -(gnorm ** 2 / curv) * gf
    if _inside(s + s_c, lo, hi):
        tau = min(1.0, _max_step(s + s_c, s_n - s_c, lo, hi))
        info.case = "dogleg"
        out = s + s_c + tau * (s_n - s_c)
    else:
        d = s_c / np.linalg.norm(s_c)
        t = _max_step(s, d, lo, hi)
        info.case = "cauchy"
        out = s + t * d
    out = np.clip(out, lo, hi)
    return (out, info) if return_info else out


def _free_newton(memory, g, free):
    p = g.size
    idx = np.flatnonzero(free)
    if p <= 2000:
        B = memory.dense(p)[np.ix_(idx, idx)]
        out = np.zeros(p)
        out[idx] = -np.linalg.solve(B, g[idx])
        return out
    # large problems: ignore the coupling to fixed coordinates
    return -memory.apply_inverse(g)


def quality_ratio(cost_old, cost_new, model_old, model_new):
    """Actual over predicted decrease; ``-inf`` when the prediction is negligible."""
    pred = model_old - model_new
    if not pred > 1e-15 * (1.0 + abs(cost_old)):
        return -math.inf
    return (cost_old - cost_new) / pred


# ---------------------------------------------------------------------------
# driver


@dataclass
class TraceRecord:
    k: int
    phase: str
    cost: float
    grad_norm: float
    delta: float
    rho: float
    accepted: bool
    step_norm: float


@dataclass
class TRResult:
    alpha: list
    cost: float
    trace: list
    evaluation: object = None
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def accepted_costs(self):
        return [r.cost for r in self.trace if r.accepted]

    def final_step_norm(self):
        acc = [r.step_norm for r in self.trace if r.accepted]
        return acc[-1] if acc else 0.0


def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def trace_to_csv(trace):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for rec in trace:
        row = asdict(rec)
        writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])
    return buf.getvalue()


def _gradient(evaluator, fields, phase, config, evaluation=None):
    """``(evaluation, gradient, phase_used)`` at ``fields``."""
    if phase == BOULIGAND:
        try:
            ev = evaluator.bouligand(fields, evaluation=evaluation)
            return ev, ev.gradient, BOULIGAND
        except AssumptionViolated:
            phase = REGULARIZED
    hub = evaluator.huber(fields, config.huber_gamma)
    if evaluation is None:
        evaluation = evaluator.evaluate(fields)
    evaluation.gradient = hub.gradient
    evaluation.gradient_kind = "huber"
    return evaluation, hub.gradient, REGULARIZED


def run(evaluator, alpha0, config=None, callback=None):
    """Trust-region iteration from ``alpha0`` until the radius drops below ``tol``.

    Parameters
    ----------
    evaluator : gradient.Evaluator
        Dataset, difference schemes and solver tolerances.
    alpha0 : ParamField or list of ParamField
        Initial parameter field(s), one per term.
    config : TRConfig, optional

    Returns
    -------
    TRResult
        Final fields, cost, evaluation and the per-iteration trace.

    Raises
    ------
    MaxIterations
        When ``config.max_iter`` iterations do not shrink the radius below
        ``tol``; the partial result is attached.
    """
    from .gradient import as_fields, concat_dofs, split_dofs

    config = (config or TRConfig()).validate()
    fields = as_fields(alpha0, evaluator.shape, evaluator.n_terms)
    memory = LBFGSMemory(config.lbfgs_memory)
    delta = float(config.delta0)
    phase = BOULIGAND if delta >= config.delta_t else REGULARIZED
    ev, g, used = _gradient(evaluator, fields, phase, config)
    cost = ev.cost
    trace = []
    k = 0
    while delta > config.tol:
        if k >= config.max_iter:
            result = TRResult(fields, cost, trace, ev, k)
            raise MaxIterations(f"trust region did not converge in {k} iterations",
                                trace=trace, result=result)
        x = concat_dofs(fields)
        s = dogleg_step(g, memory, delta, x)
        s = np.maximum(s, -x)
        pred = -model_value(g, memory, s)
        # a negligible predicted decrease is rejected without a lower-level solve
        rho = -math.inf
        accepted = False
        trial_ev = None
        if pred > 1e-15 * (1.0 + abs(cost)):
            trial_fields = split_dofs(fields, np.maximum(x + s, 0.0))
            trial_ev = evaluator.evaluate(trial_fields)
            rho = quality_ratio(cost, trial_ev.cost, 0.0, -pred)
            accepted = rho > config.eta1
        trace.append(TraceRecord(k, used, cost if not accepted else trial_ev.cost,
                                 float(np.linalg.norm(g)), delta, rho, accepted,
                                 float(np.linalg.norm(s)) if accepted else 0.0))
        if rho >= config.eta2:
            delta = min(config.grow_factor * delta, config.delta_max)
        elif rho > config.eta1:
            delta = config.gamma2 * delta
        else:
            delta = config.gamma1 * delta
        new_phase = BOULIGAND if delta >= config.delta_t else REGULARIZED
        if new_phase != phase and config.clear_memory_on_switch:
            memory.clear()
        if accepted:
            fields = trial_fields
            cost = trial_ev.cost
            ev, g_new, used = _gradient(evaluator, fields, new_phase, config, trial_ev)
            memory.update(s, g_new - g)
            g = g_new
        elif new_phase != phase:
            ev, g, used = _gradient(evaluator, fields, new_phase, config, ev)
        phase = new_phase
        k += 1
        if callback is not None:
            callback(trace[-1])
    return TRResult(fields, cost, trace, ev, k)
