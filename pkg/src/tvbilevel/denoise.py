"""Lower-level total-variation denoising.

Solves

    min_u  1/2 |u - f|^2 + sum_i sum_j alpha_ij |(K_i u)_j|

to primal-dual optimality with a primal-dual hybrid gradient (PDHG)
iteration, finished by an active-set Newton polish that reproduces the
exact solution once the zero-gradient rows are identified. The
Huber-smoothed variant is solved by a globalized semismooth Newton
method.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from . import kernels
from .exceptions import InvalidParam, NonConvergence, ShapeMismatch, SingularSystem
from .grid import GradientOperator, apply_K, apply_KT, make_gradient_operator, row_norms, stacked_norm


class Residuals(NamedTuple):
    stationarity: float
    complementarity: float
    dual_feasibility: float

    def max(self):
        return max(self)


# ---------------------------------------------------------------------------
# problem / solution containers


@dataclass(eq=False)
class DenoiseProblem:
    """Datum ``f`` plus a list of (operator, per-pixel alpha) terms.

    ``alpha`` entries may be given as arrays of length n, scalars, or any
    object with a ``lift()`` method returning such an array.
    """

    f: np.ndarray
    terms: list
    shape: tuple = None

    def __post_init__(self):
        if not self.terms:
            raise ShapeMismatch("a denoising problem needs at least one term")
        op0 = self.terms[0][0]
        self.shape = (op0.m1, op0.m2)
        f = np.asarray(self.f, dtype=float)
        if f.size != op0.m:
            raise ShapeMismatch(f"datum of size {f.size} does not match grid {self.shape}")
        self.f = f.ravel().copy()
        clean = []
        for op, alpha in self.terms:
            if op.shape != self.shape:
                raise ShapeMismatch("all operators must share the datum's grid")
            if hasattr(alpha, "lift"):
                alpha = alpha.lift()
            a = np.asarray(alpha, dtype=float)
            a = np.full(op.n, float(a)) if a.ndim == 0 else a.ravel().copy()
            if a.size != op.n:
                raise ShapeMismatch(f"alpha of size {a.size} does not match n={op.n}")
            if not np.all(np.isfinite(a)):
                raise InvalidParam("alpha must be finite")
            if np.any(a < 0):
                raise InvalidParam(f"alpha must be nonnegative (min {a.min():.3e})")
            clean.append((op, a))
        self.terms = clean

    @classmethod
    def single(cls, f, alpha, scheme="forward"):
        f = np.asarray(f, dtype=float)
        if f.ndim == 1:
            f = f.reshape(1, -1)
        op = make_gradient_operator(f.shape[0], f.shape[1], scheme)
        return cls(f, [(op, alpha)])

    @property
    def operators(self):
        return [op for op, _ in self.terms]

    @property
    def alphas(self):
        return [a for _, a in self.terms]

    @property
    def m(self):
        return self.f.size

    def with_alphas(self, alphas):
        return DenoiseProblem(self.f.reshape(self.shape), list(zip(self.operators, alphas)))


@dataclass(eq=False)
class DenoiseSolution:
    u: np.ndarray
    duals: list
    residuals: Residuals
    iterations: int = 0
    converged: bool = True
    gamma: float = None
    polished: bool = False
    info: dict = field(default_factory=dict)

    @property
    def q(self):
        return self.duals[0]


@dataclass(frozen=True)
class HuberParams:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidParam("Huber gamma must be positive")


# ---------------------------------------------------------------------------
# energies and residuals


def fidelity_grad(u, f):
    return u - f


def tv_energy(problem, u):
    u = np.asarray(u, dtype=float).ravel()
    e = 0.5 * float(np.sum((u - problem.f) ** 2))
    for op, a in problem.terms:
        e += float(np.dot(a, row_norms(apply_K(op, u))))
    return e


def huber_energy(problem, u, gamma):
    u = np.asarray(u, dtype=float).ravel()
    e = 0.5 * float(np.sum((u - problem.f) ** 2))
    for op, a in problem.terms:
        e += float(np.dot(a, huber_norm(apply_K(op, u), gamma)))
    return e


def _tv_residuals(problem, u, duals):
    r = u - problem.f
    comp = 0.0
    feas = 0.0
    for (op, a), q in zip(problem.terms, duals):
        r = r + apply_KT(op, q)
        g = apply_K(op, u)
        gn = row_norms(g)
        comp = max(comp, float(np.max(np.abs(np.sum(q * g, axis=1) - a * gn))))
        feas = max(feas, float(np.max(row_norms(q) - a)))
    return Residuals(float(np.linalg.norm(r)), comp, max(feas, 0.0))


def _huber_residuals(problem, u, duals, gamma):
    r = u - problem.f
    feas = 0.0
    comp = 0.0
    for (op, a), q in zip(problem.terms, duals):
        r = r + apply_KT(op, q)
        hq = a[:, None] * huber_grad(apply_K(op, u), gamma)
        comp = max(comp, float(np.max(np.abs(q - hq))))
        feas = max(feas, float(np.max(row_norms(q) - a)))
    return Residuals(float(np.linalg.norm(r)), comp, max(feas, 0.0))


def primal_dual_residual(problem, sol):
    """Recompute the residual triple of ``sol`` from scratch.

    For exact TV solutions: stationarity ``|u - f + sum K_i^T q_i|``,
    complementarity ``max |<q_j, (Ku)_j> - alpha_j |(Ku)_j||`` and dual
    feasibility ``max(0, max(|q_j| - alpha_j))``. For Huber solutions the
    complementarity slot measures ``max |q_j - alpha_j h_gamma((Ku)_j)|``.
    """
    u = np.asarray(sol.u, dtype=float).ravel()
    if sol.gamma is not None:
        return _huber_residuals(problem, u, sol.duals, sol.gamma)
    return _tv_residuals(problem, u, sol.duals)


# ---------------------------------------------------------------------------
# Huber function


def huber_norm(z, gamma):
    z = np.asarray(z, dtype=float)
    r = np.hypot(z[..., 0], z[..., 1])
    return np.where(r >= 1.0 / gamma, r - 0.5 / gamma, 0.5 * gamma * r * r)


def huber_grad(z, gamma):
    z = np.asarray(z, dtype=float)
    r = np.hypot(z[..., 0], z[..., 1])
    outer = r >= 1.0 / gamma
    scale = np.where(outer, 1.0 / np.where(outer, r, 1.0), gamma)
    return z * scale[..., None]


def huber_hess(z, gamma):
    """2x2 generalized Hessian of the Huber norm at each row of ``z``."""
    z = np.asarray(z, dtype=float)
    r = np.hypot(z[..., 0], z[..., 1])
    outer = r >= 1.0 / gamma
    rs = np.where(outer, r, 1.0)
    eye = np.eye(2)
    h_in = gamma * np.broadcast_to(eye, z.shape + (2,))
    zz = z[..., :, None] * z[..., None, :]
    h_out = eye / rs[..., None, None] - zz / (rs ** 3)[..., None, None]
    return np.where(outer[..., None, None], h_out, h_in)


# ---------------------------------------------------------------------------
# sparse helpers shared with the sensitivity machinery


def block_diag_rows(blocks):
    """Sparse 2n x 2n matrix acting on ``[x; y]``-stacked fields row-wise."""
    n = blocks.shape[0]
    idx = np.arange(n)
    rows = np.concatenate([idx, idx, idx + n, idx + n])
    cols = np.concatenate([idx, idx + n, idx, idx + n])
    data = np.concatenate([blocks[:, 0, 0], blocks[:, 0, 1], blocks[:, 1, 0], blocks[:, 1, 1]])
    return sp.csr_matrix((data, (rows, cols)), shape=(2 * n, 2 * n))


def curvature_blocks(g, alpha, rows):
    """Blocks ``alpha_j T_j`` with ``T_j = I/|g_j| - g_j g_j^T/|g_j|^3`` on ``rows``."""
    n = g.shape[0]
    out = np.zeros((n, 2, 2))
    if np.any(rows):
        gr = g[rows]
        r = np.hypot(gr[:, 0], gr[:, 1])
        assert np.all(r > 0), "curvature evaluated at a zero gradient row"
        t = np.eye(2) / r[:, None, None] - gr[:, :, None] * gr[:, None, :] / (r ** 3)[:, None, None]
        out[rows] = alpha[rows, None, None] * t
    return out


def edge_components(m, ops, active_rows):
    """Connected components of pixels tied by zero-gradient constraints.

    ``active_rows[i]`` is a boolean mask of rows of ``ops[i]`` constrained
    to ``(K_i v)_j = 0``. Every such row equates pixel pairs, so the
    constrained subspace consists of images constant on each component.
    Returns ``(n_components, labels)``.
    """
    rows, cols = [], []
    for op, act in zip(ops, active_rows):
        if not np.any(act):
            continue
        for mat in (op.kx, op.ky):
            sub = mat[np.flatnonzero(act)].tocoo()
            if sub.nnz == 0:
                continue
            # each row has exactly two nonzeros of opposite sign
            order = np.lexsort((sub.data, sub.row))
            r = sub.row[order]
            c = sub.col[order]
            rows.append(c[0::2])
            cols.append(c[1::2])
            assert np.array_equal(r[0::2], r[1::2])
    if rows:
        a = np.concatenate(rows)
        b = np.concatenate(cols)
        adj = sp.csr_matrix((np.ones(a.size), (a, b)), shape=(m, m))
    else:
        adj = sp.csr_matrix((m, m))
    return connected_components(adj, directed=False)


def component_basis(m, labels, n_comp):
    return sp.csr_matrix((np.ones(m), (np.arange(m), labels)), shape=(m, n_comp))


def tied_rows(op, z):
    """Rows of ``op`` that vanish on every image in the range of ``z``."""
    out = np.ones(op.n, dtype=bool)
    for mat in (op.kx, op.ky):
        kz = (mat @ z).tocsr()
        kz.eliminate_zeros()
        out &= np.diff(kz.indptr) == 0
    return out


def _factorized(mat):
    mat = sp.csc_matrix(mat)
    if mat.shape[0] == 0:
        return lambda b: np.zeros(0)
    try:
        return spla.factorized(mat)
    except RuntimeError as exc:  # singular factor
        raise SingularSystem(str(exc)) from exc


# ---------------------------------------------------------------------------
# exact TV solver


def _reduced_newton(problem, z, y, inactive, tol, max_newton):
    """Newton's method for the TV energy restricted to ``u = z @ y``.

    Rows in ``inactive`` are assumed nonzero; the others vanish on the
    subspace. Returns ``(y, status)`` with status ``"ok"``, ``"kink"`` (an
    inactive row collapsed towards zero) or ``"fail"``.
    """
    ops = problem.operators
    alphas = problem.alphas
    m = problem.m
    mats = [op.matrix for op in ops]
    fscale = 1.0 + np.linalg.norm(problem.f)

    def energy_grad(yv):
        u = z @ yv
        e = 0.5 * float(np.sum((u - problem.f) ** 2))
        gu = u - problem.f
        min_norm = np.inf
        for op, a, ina in zip(ops, alphas, inactive):
            if not np.any(ina):
                continue
            g = apply_K(op, u)
            gn = row_norms(g)
            e += float(np.dot(a[ina], gn[ina]))
            min_norm = min(min_norm, float(gn[ina].min()))
            w = np.zeros_like(g)
            safe = np.where(gn[ina] > 0, gn[ina], 1.0)
            w[ina] = a[ina, None] * g[ina] / safe[:, None]
            gu = gu + apply_KT(op, w)
        return e, gu, min_norm

    e, gu, min_norm = energy_grad(y)
    prev = np.inf
    for _ in range(max_newton):
        rg = z.T @ gu
        rnorm = np.linalg.norm(rg)
        # stagnation far below the solver tolerances is round-off
        if rnorm <= tol * fscale or (rnorm <= 1e-9 * fscale and rnorm > 0.5 * prev):
            return y, "ok"
        prev = rnorm
        if not min_norm > 0:
            return y, "kink"
        u = z @ y
        hess = sp.identity(m, format="csr")
        for op, a, ina, mat in zip(ops, alphas, inactive, mats):
            if np.any(ina):
                blocks = curvature_blocks(apply_K(op, u), a, ina)
                hess = hess + mat.T @ block_diag_rows(blocks) @ mat
        red = (z.T @ hess @ z).tocsc()
        try:
            d = _factorized(red)(-rg)
        except SingularSystem:
            return y, "fail"
        slope = float(np.dot(rg, d))
        if not slope < 0:
            return y, "fail"
        step = 1.0
        for _ls in range(12):
            e_new, gu_new, mn_new = energy_grad(y + step * d)
            if mn_new > 0 and (e_new <= e + 1e-4 * step * slope
                               or abs(e_new - e) <= 1e-15 * abs(e)):
                break
            step *= 0.5
        else:
            return y, "kink"
        y = y + step * d
        e, gu, min_norm = e_new, gu_new, mn_new
    return y, "fail"


def _recover_duals(problem, u, duals0, active, inactive, labels, max_proj=500):
    """Duals for a candidate primal: exact on inactive rows, fitted on active rows.

    Active-row duals start from ``duals0``, receive the least-change
    correction that restores stationarity, and are then alternately
    projected onto the discs and back onto the stationarity constraint
    until the overshoot is at round-off level.
    """
    ops = problem.operators
    alphas = problem.alphas
    m = problem.m
    duals = []
    base = u - problem.f
    for op, a, q0, act, ina in zip(ops, alphas, duals0, active, inactive):
        g = apply_K(op, u)
        gn = row_norms(g)
        q = np.zeros_like(g)
        safe = np.where(gn[ina] > 0, gn[ina], 1.0)
        q[ina] = a[ina, None] * g[ina] / safe[:, None]
        base = base + apply_KT(op, q)
        q[act] = q0[act]
        duals.append(q)
    act_mats = []
    for op, act in zip(ops, active):
        sel = sp.diags(np.concatenate([act, act]).astype(float))
        act_mats.append(sel @ op.matrix)
    if not any(mm.nnz for mm in act_mats):
        return duals
    kat = sp.vstack(act_mats).tocsr()
    lap = (kat.T @ kat).tocsr()
    # ground one pixel per component so the Laplacian becomes definite
    ground = np.zeros(m, dtype=bool)
    _, first = np.unique(labels, return_index=True)
    ground[first] = True
    keep = ~ground
    solve = _factorized(lap[keep][:, keep]) if np.any(keep) else None

    def restore(qs):
        r = base.copy()
        for op, q, act in zip(ops, qs, active):
            qa = np.zeros_like(q)
            qa[act] = q[act]
            r += apply_KT(op, qa)
        zsol = np.zeros(m)
        if solve is not None:
            zsol[keep] = solve(-r[keep])
        delta = kat @ zsol
        off = 0
        for op, q, act in zip(ops, qs, active):
            n = op.n
            q[act, 0] += delta[off:off + n][act]
            q[act, 1] += delta[off + n:off + 2 * n][act]
            off += 2 * n

    def overshoot(qs):
        return max(float(np.max(row_norms(q)[act] - a[act], initial=0.0))
                   for q, a, act in zip(qs, alphas, active))

    restore(duals)
    excess = overshoot(duals)
    for _ in range(max_proj):
        if excess <= 1e-14 * (1.0 + max(float(a.max()) for a in alphas)):
            break
        for q, a, act in zip(duals, alphas, active):
            qn = row_norms(q)
            over = act & (qn > a)
            q[over] *= (a[over] / qn[over])[:, None]
        restore(duals)
        new = overshoot(duals)
        if new > 0.999 * excess:
            excess = new
            break
        excess = new
    return duals


def _polish(problem, u0, duals0, kappa, newton_tol=1e-14, max_newton=30, rounds=20):
    """Active-set Newton refinement of an approximate solution.

    Rows whose gradient is below ``kappa`` or whose dual has slack are
    frozen to zero; the energy is minimized exactly on that subspace and
    the duals are rebuilt. Frozen rows whose rebuilt dual leaves the
    feasible disc are released and the step repeated. Returns
    ``(u, duals)`` or None.
    """
    ops = problem.operators
    alphas = problem.alphas
    m = problem.m
    active = []
    for op, a, q in zip(ops, alphas, duals0):
        gn = row_norms(apply_K(op, u0))
        slack = row_norms(q) < a * (1.0 - 1e-3)
        active.append((gn <= kappa) | slack)
    seen = set()
    rng = np.random.default_rng(0)
    released_rows = [np.zeros_like(act) for act in active]
    for _round in range(rounds):
        key = b"".join(np.packbits(act).tobytes() for act in active)
        if key in seen:
            return None
        seen.add(key)
        n_comp, labels = edge_components(m, ops, active)
        z = component_basis(m, labels, n_comp)
        # freezing rows ties whole components, which may zero further rows
        tied = [tied_rows(op, z) for op in ops]
        inactive = [(~t) & (a > 0) for t, a in zip(tied, alphas)]
        counts = np.bincount(labels, minlength=n_comp).astype(float)
        y0 = np.bincount(labels, weights=u0, minlength=n_comp) / counts
        # split pieces of a flat region start level; nudge them apart so
        # released rows have a nonzero gradient
        y0 = y0 + 1e-2 * kappa * rng.standard_normal(n_comp)
        y, status = _reduced_newton(problem, z, y0, inactive, newton_tol, max_newton)
        u = z @ y
        if status == "kink":
            changed = False
            for op, act, ina, rel in zip(ops, active, inactive, released_rows):
                gn = row_norms(apply_K(op, u))
                small = ina & (gn <= kappa) & ~rel
                if np.any(small):
                    act |= small
                    changed = True
            if not changed:
                return None
            continue
        if status != "ok":
            return None
        try:
            duals = _recover_duals(problem, u, duals0, tied, inactive, labels)
        except SingularSystem:
            return None
        excess = [np.where(t, row_norms(q) - a * (1.0 + 1e-9) - 1e-13, -np.inf)
                  for q, a, t in zip(duals, alphas, tied)]
        worst = max(float(ex.max()) for ex in excess)
        if worst > 0:
            # release only the worst offenders; the rest often recover
            released = False
            for ex, act, rel in zip(excess, active, released_rows):
                bad = act & (ex >= 0.5 * worst)
                if np.any(bad):
                    act &= ~bad
                    rel |= bad
                    released = True
            if not released:
                return None
            continue
        for q, a in zip(duals, alphas):
            qn = row_norms(q)
            over = qn > a
            q[over] *= (a[over] / qn[over])[:, None]
        return u, duals
    return None


POLISH_MAX_PIXELS = 4096


def solve_tv(problem, tol=1e-9, max_iter=200000, warm_start=None, dual_tol=None,
             check_every=50, polish=None):
    """Solve the exact TV denoising problem to primal-dual tolerance ``tol``.

    Parameters
    ----------
    problem : DenoiseProblem
    tol : float
        Bound on stationarity and complementarity residuals.
    max_iter : int
        PDHG iteration budget.
    warm_start : DenoiseSolution, optional
        Previous solution; its duals are projected onto the new discs.
    dual_tol : float, optional
        Bound on the dual infeasibility, ``tol / 10`` by default.
    polish : bool, optional
        Try the active-set Newton polish when the residuals stall. A
        failed attempt costs several sparse factorizations, so by default
        it is enabled only for grids of at most ``POLISH_MAX_PIXELS``.

    Raises ``NonConvergence`` (with residuals and last iterate attached)
    when ``max_iter`` PDHG iterations do not reach the tolerance.
    """
    if not tol > 0:
        raise InvalidParam("tol must be positive")
    dual_tol = tol * 0.1 if dual_tol is None else dual_tol
    ops = problem.operators
    shape = problem.shape
    f2 = problem.f.reshape(shape)
    n_terms = len(ops)
    alpha3 = np.ascontiguousarray(np.stack([a.reshape(shape) for a in problem.alphas]))
    schemes = np.array([op.scheme.code for op in ops], dtype=np.int64)

    def done(res):
        return (res.stationarity <= tol and res.complementarity <= tol
                and res.dual_feasibility <= dual_tol)

    if all(np.all(a == 0) for a in problem.alphas):
        duals = [np.zeros((op.n, 2)) for op in ops]
        return DenoiseSolution(problem.f.copy(), duals, Residuals(0.0, 0.0, 0.0), 0)

    if warm_start is not None:
        u = np.array(warm_start.u, dtype=float).reshape(shape)
        q = np.stack([np.asarray(d, dtype=float).reshape(shape + (2,)) for d in warm_start.duals])
        for t in range(n_terms):
            kernels.project_balls(q[t], alpha3[t])
    else:
        u = f2.copy()
        q = np.zeros((n_terms,) + shape + (2,))
    u = np.ascontiguousarray(u)
    q = np.ascontiguousarray(q)
    ubar = u.copy()

    def current():
        return u.ravel().copy(), [q[t].reshape(-1, 2).copy() for t in range(n_terms)]

    uu, dd = current()
    res = _tv_residuals(problem, uu, dd)
    if done(res):
        return DenoiseSolution(uu, dd, res, 0)

    norm_k = stacked_norm(ops)
    tau = sigma = 0.99 / norm_k
    it = 0
    if polish is None:
        polish = problem.m <= POLISH_MAX_PIXELS
    next_polish = 1e-3
    polish_scale = 1.0 + float(np.max(np.abs(problem.f)))
    while it < max_iter:
        chunk = min(check_every, max_iter - it)
        kernels.pdhg_iterate(f2, alpha3, schemes, u, ubar, q, tau, sigma, chunk)
        it += chunk
        uu, dd = current()
        res = _tv_residuals(problem, uu, dd)
        if done(res):
            return DenoiseSolution(uu, dd, res, it)
        if polish and res.max() <= next_polish:
            for rel in (1e-5, 1e-6, 1e-4, 1e-7, 1e-3):
                out = _polish(problem, uu, dd, rel * polish_scale)
                if out is None:
                    continue
                pu, pd = out
                pres = _tv_residuals(problem, pu, pd)
                if done(pres):
                    return DenoiseSolution(pu, pd, pres, it, polished=True)
            next_polish = res.max() * 0.1
        if check_every < 400:
            check_every = min(400, check_every * 2)
    sol = DenoiseSolution(uu, dd, res, it, converged=False)
    raise NonConvergence(f"PDHG did not reach tol={tol:g} in {max_iter} iterations; "
                         f"residuals {tuple(res)}", residuals=res, solution=sol)


# ---------------------------------------------------------------------------
# Huber-regularized solver


def huber_hessian(problem, u, gamma):
    """Sparse generalized Hessian ``I + sum_i K_i^T (alpha_i h'_gamma) K_i``."""
    hess = sp.identity(problem.m, format="csr")
    for op, a in problem.terms:
        blocks = a[:, None, None] * huber_hess(apply_K(op, u), gamma)
        mat = op.matrix
        hess = hess + mat.T @ block_diag_rows(blocks) @ mat
    return hess.tocsc()


def _huber_gradient(problem, u, gamma):
    g = u - problem.f
    for op, a in problem.terms:
        g = g + apply_KT(op, a[:, None] * huber_grad(apply_K(op, u), gamma))
    return g


def solve_tv_huber(problem, h, tol=1e-10, max_iter=500, warm_start=None):
    """Minimize the Huber-smoothed TV energy by globalized semismooth Newton."""
    gamma = h.gamma if isinstance(h, HuberParams) else HuberParams(float(h)).gamma
    if not tol > 0:
        raise InvalidParam("tol must be positive")
    u = problem.f.copy() if warm_start is None else np.array(warm_start.u, dtype=float).ravel()
    e = huber_energy(problem, u, gamma)
    g = _huber_gradient(problem, u, gamma)
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        hess = huber_hessian(problem, u, gamma)
        try:
            d = _factorized(hess)(-g)
        except SingularSystem:
            d = -g
        slope = float(np.dot(g, d))
        if not slope < 0:
            d = -g
            slope = -gnorm ** 2
        step = 1.0
        # predicted energy decrease below round-off: the energy cannot rank steps
        accepted = False
        flat = -slope <= 1e-12 * (1.0 + abs(e))
        for _ls in range(0 if flat else 60):
            u_new = u + step * d
            e_new = huber_energy(problem, u_new, gamma)
            if e_new <= e + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if accepted:
            g_new = _huber_gradient(problem, u_new, gamma)
            gn_new = float(np.linalg.norm(g_new))
        else:
            # energy flat to round-off: backtrack on the gradient norm instead
            step = 1.0
            for _ls in range(40):
                u_try = u + step * d
                g_try = _huber_gradient(problem, u_try, gamma)
                gn_try = float(np.linalg.norm(g_try))
                if gn_try < (1.0 - 1e-4 * step) * gnorm:
                    break
                step *= 0.5
            else:
                break
            u_new, g_new, gn_new = u_try, g_try, gn_try
            e_new = huber_energy(problem, u_new, gamma)
        u, g, gnorm, e = u_new, g_new, gn_new, e_new
    duals = [a[:, None] * huber_grad(apply_K(op, u), gamma) for op, a in problem.terms]
    res = _huber_residuals(problem, u, duals, gamma)
    sol = DenoiseSolution(u, duals, res, it, converged=gnorm <= tol, gamma=gamma)
    if gnorm > tol:
        raise NonConvergence(f"Huber Newton stalled at |grad|={gnorm:.3e} (tol {tol:g})",
                             residuals=res, solution=sol)
    return sol
