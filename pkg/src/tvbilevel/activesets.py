"""Active-set classification, sensitivities and stationarity certificates.

Index sets of a lower-level solution ``(u, q)`` at parameter ``alpha``:

    I    inactive       |(Ku)_j| > 0, alpha_j > 0
    A_s  strongly act.  (Ku)_j = 0, |q_j| < alpha_j
    B    biactive       (Ku)_j = 0, |q_j| = alpha_j > 0
    I_0  zero-inactive  |(Ku)_j| > 0, alpha_j = 0
    T    triactive      (Ku)_j = 0, alpha_j = 0

All linearized systems live on the subspace

    V = {v : (K v)_j = 0 on A_s and B_1, (K v)_j in span(q_j) on B_2}

and share the operator ``I + sum_I K_j^T alpha_j T_j K_j``.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .denoise import (DenoiseProblem, block_diag_rows, component_basis, curvature_blocks,
                      edge_components, primal_dual_residual, solve_tv, _factorized)
from .exceptions import (AssumptionViolated, InfeasibleDual, NoBranchFits, ShapeMismatch,
                         SingularSystem)
from .grid import apply_K, apply_KT, row_norms

SET_NAMES = ("inactive", "strongly_active", "biactive", "zero_inactive", "triactive")


def default_eps(u_grad_norms, alpha):
    """Relative classification tolerances ``(eps_x, eps_a)``."""
    eps_x = 1e-6 * (1.0 + float(np.max(u_grad_norms, initial=0.0)))
    eps_a = 1e-6 * (1.0 + float(np.max(alpha, initial=0.0)))
    return eps_x, eps_a


@dataclass(frozen=True)
class ActiveSetPartition:
    """Boolean masks of the five index sets and the biactive split."""

    inactive: np.ndarray
    strongly_active: np.ndarray
    biactive: np.ndarray
    zero_inactive: np.ndarray
    triactive: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    eps_x: float
    eps_a: float

    @property
    def n(self):
        return self.inactive.size

    def indices(self, name):
        return np.flatnonzero(getattr(self, name))

    def counts(self):
        return {name: int(getattr(self, name).sum()) for name in SET_NAMES}

    @property
    def degenerate(self):
        """True when any of B, I_0 or T is nonempty."""
        return bool(self.biactive.any() or self.zero_inactive.any() or self.triactive.any())

    def with_b2(self, b2):
        b2 = np.asarray(b2, dtype=bool) & self.biactive
        return ActiveSetPartition(self.inactive, self.strongly_active, self.biactive,
                                  self.zero_inactive, self.triactive, self.biactive & ~b2, b2,
                                  self.eps_x, self.eps_a)

    def check(self):
        """Assert the partition invariants."""
        stack = np.stack([getattr(self, name) for name in SET_NAMES]).astype(int)
        assert np.all(stack.sum(axis=0) == 1), "index sets must partition the rows"
        assert not np.any(self.b1 & self.b2)
        assert np.array_equal(self.b1 | self.b2, self.biactive)


def classify(u, q, alpha, op, eps_x=None, eps_a=None, b2=None):
    """Partition the gradient rows of ``op`` at a lower-level solution.

    Parameters
    ----------
    u : ndarray
        Primal solution (length m).
    q : ndarray
        Dual field, shape (n, 2).
    alpha : ndarray
        Per-pixel parameter (length n).
    op : GradientOperator
    eps_x, eps_a : float, optional
        Gradient and dual-slack tolerances; relative defaults otherwise.
    b2 : ndarray of bool, optional
        Biactive rows to place in B_2 (default: none, so B_1 = B).

    Raises
    ------
    InfeasibleDual
        If some ``|q_j|`` exceeds ``alpha_j`` by more than ``10 * eps_a``.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    alpha = np.asarray(alpha, dtype=float).ravel()
    if q.shape[0] != op.n or alpha.size != op.n:
        raise ShapeMismatch("q and alpha must have one row per gradient row")
    gn = row_norms(apply_K(op, u))
    qn = row_norms(q)
    d_x, d_a = default_eps(gn, alpha)
    eps_x = d_x if eps_x is None else float(eps_x)
    eps_a = d_a if eps_a is None else float(eps_a)
    excess = qn - alpha
    if np.any(excess > 10.0 * eps_a):
        j = int(np.argmax(excess))
        raise InfeasibleDual(f"|q_{j}| exceeds alpha_{j} by {excess[j]:.3e} (eps_a={eps_a:.1e})")
    big = gn > eps_x
    pos = alpha > eps_a
    inactive = big & pos
    zero_inactive = big & ~pos
    strongly_active = ~big & (qn < alpha - eps_a)
    # slight dual overshoot (within 10 eps_a) still counts as tight
    biactive = ~big & pos & ~strongly_active
    triactive = ~big & ~pos & ~strongly_active
    b2 = np.zeros(op.n, bool) if b2 is None else np.asarray(b2, dtype=bool) & biactive
    return ActiveSetPartition(inactive, strongly_active, biactive, zero_inactive, triactive,
                              biactive & ~b2, b2, eps_x, eps_a)


def cone_membership(v, partition, q, alpha, op, tol=1e-8):
    """Membership of ``v`` in the critical cone C(alpha, u)."""
    kv = apply_K(op, v)
    kvn = row_norms(kv)
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    alpha = np.asarray(alpha, dtype=float).ravel()
    sa = partition.strongly_active
    if np.any(kvn[sa] > tol):
        return False
    b = partition.biactive
    gap = np.abs(np.sum(q[b] * kv[b], axis=1) - alpha[b] * kvn[b])
    return bool(np.all(gap <= tol))


# ---------------------------------------------------------------------------
# linearized systems on V


class LinearizedSystem:
    """The operator ``A = I + sum_I K^T alpha T K`` restricted to a subspace.

    Parameters
    ----------
    m : int
        Pixel count.
    ops, alphas, grads, duals : lists
        Per-term operators, per-pixel parameters, gradient fields ``Ku``
        and duals.
    curved : list of bool arrays
        Rows carrying curvature ``alpha_j T_j`` (the inactive rows).
    zero_rows : list of bool arrays
        Rows constrained to ``(K v)_j = 0``.
    span_rows : list of bool arrays, optional
        Rows constrained to ``(K v)_j`` parallel to ``q_j``.
    """

    def __init__(self, m, ops, alphas, grads, duals, curved, zero_rows, span_rows=None):
        self.m = m
        self.ops = ops
        span_rows = span_rows or [np.zeros(op.n, bool) for op in ops]
        mat = sp.identity(m, format="csr")
        for op, a, g, rows in zip(ops, alphas, grads, curved):
            if np.any(rows):
                k = op.matrix
                mat = mat + k.T @ block_diag_rows(curvature_blocks(g, a, rows)) @ k
        self.matrix = mat.tocsr()
        n_comp, labels = edge_components(m, ops, zero_rows)
        z = component_basis(m, labels, n_comp)
        self.labels = labels
        if any(np.any(s) for s in span_rows):
            # (K v)_j parallel to q_j  <=>  <q_j^perp, (K v)_j> = 0
            cons = []
            for op, q, rows in zip(ops, duals, span_rows):
                idx = np.flatnonzero(rows)
                if idx.size == 0:
                    continue
                perp = np.column_stack([-q[idx, 1], q[idx, 0]])
                perp /= np.linalg.norm(perp, axis=1)[:, None]
                kz_x = (op.kx[idx] @ z).toarray()
                kz_y = (op.ky[idx] @ z).toarray()
                cons.append(perp[:, :1] * kz_x + perp[:, 1:] * kz_y)
            null = sla.null_space(np.vstack(cons))
            self.basis = np.asarray(z @ null)
            self.dense = True
        else:
            self.basis = z
            self.dense = False
        red = self.basis.T @ (self.matrix @ self.basis)
        if self.dense:
            red = np.asarray(red)
            self._solve = _dense_solver(red)
        else:
            self._solve = _factorized(sp.csc_matrix(red))

    @property
    def dim(self):
        return self.basis.shape[1]

    def solve(self, rhs):
        """Galerkin solution ``x in V`` of ``<A x, v> = <rhs, v>`` for all v in V."""
        y = self._solve(np.asarray(self.basis.T @ rhs).ravel())
        return np.asarray(self.basis @ y).ravel()


def _dense_solver(mat):
    if mat.shape[0] == 0:
        return lambda b: np.zeros(0)
    try:
        factor = sla.cho_factor(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    return lambda b: sla.cho_solve(factor, b)


def _system_for(problem, u, duals, partitions):
    ops = problem.operators
    grads = [apply_K(op, u) for op in ops]
    curved = [p.inactive for p in partitions]
    zero = [p.strongly_active | p.b1 for p in partitions]
    span = [p.b2 for p in partitions]
    return LinearizedSystem(problem.m, ops, problem.alphas, grads, duals, curved, zero, span)


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def solve_sensitivity_system(u, q, alpha, h, partition, op=None, problem=None):
    """Directional derivative ``eta = S'(alpha; h)`` from the linear system on V.

    Either pass a single operator ``op`` with arrays ``q``, ``alpha``,
    ``h`` and ``partition``, or a multi-term ``problem`` with lists.

    Raises
    ------
    AssumptionViolated
        If I_0 or T is nonempty.
    """
    if problem is None:
        problem = DenoiseProblem(np.zeros(op.m), [(op, alpha)])
    duals = [np.asarray(d, float).reshape(-1, 2) for d in _as_list(q)]
    hs = [np.asarray(x, float).ravel() for x in _as_list(h)]
    partitions = _as_list(partition)
    for p in partitions:
        if p.zero_inactive.any() or p.triactive.any():
            raise AssumptionViolated("sensitivity system requires empty I_0 and T")
    system = _system_for(problem, np.asarray(u, float).ravel(), duals, partitions)
    rhs = np.zeros(problem.m)
    for op, a, qd, hh, p in zip(problem.operators, problem.alphas, duals, hs, partitions):
        rows = p.inactive | p.b2
        w = np.zeros_like(qd)
        w[rows] = (hh[rows] / a[rows])[:, None] * qd[rows]
        rhs -= apply_KT(op, w)
    return system.solve(rhs)


def directional_derivative_fd(alpha, h, problem, t_list=(1e-3, 5e-4), tol=1e-12,
                              max_iter=400000, base=None):
    """One-sided difference quotients of the solution map and their extrapolation.

    Parameters
    ----------
    alpha, h : ndarray or list of ndarray
        Per-pixel parameter(s) and direction(s), one per term.
    problem : DenoiseProblem
        Supplies the datum and operators; its parameters are replaced.
    t_list : sequence of float
        Step sizes; the two smallest feed a linear extrapolation to t = 0.

    Returns
    -------
    etas : list of ndarray
        ``(S(alpha + t h) - S(alpha)) / t`` for each t.
    extrapolated : ndarray
    """
    alphas = [np.asarray(a, float).ravel() for a in _as_list(alpha)]
    hs = [np.asarray(x, float).ravel() for x in _as_list(h)]
    if base is None:
        base = solve_tv(problem.with_alphas(alphas), tol=tol, max_iter=max_iter)
    etas = []
    for t in t_list:
        shifted = [a + t * d for a, d in zip(alphas, hs)]
        if any(np.any(s < 0) for s in shifted):
            raise AssumptionViolated(f"alpha + t*h leaves the feasible set at t={t:g}")
        if all(np.all(d == 0) for d in hs):
            etas.append(np.zeros(problem.m))
            continue
        sol = solve_tv(problem.with_alphas(shifted), tol=tol, max_iter=max_iter, warm_start=base)
        etas.append((sol.u - base.u) / t)
    if len(t_list) == 1:
        return etas, etas[0]
    order = np.argsort(t_list)
    t1, t2 = t_list[order[0]], t_list[order[1]]
    e1, e2 = etas[order[0]], etas[order[1]]
    extrapolated = (t2 * e1 - t1 * e2) / (t2 - t1)
    return etas, extrapolated


# ---------------------------------------------------------------------------
# M-stationarity certificate


@dataclass
class MStationarityCertificate:
    """Multipliers and residuals of the M-stationarity system.

    ``p`` is the adjoint, ``mu`` the per-term multiplier fields, ``vartheta``
    the per-term pixel multipliers and ``rho`` the multiplier of the
    nonnegativity constraint in parameter space (one entry per dof).
    """

    p: list
    mu: list
    vartheta: list
    rho: np.ndarray
    residuals: dict
    branches: dict
    tol: float
    exhaustive: bool = True
    notes: list = field(default_factory=list)

    @property
    def stationary(self):
        return all(v <= self.tol for v in self.residuals.values())

    def max_residual(self):
        return max(self.residuals.values())

    def report(self):
        """Structured text: one line per equation family, then branches."""
        lines = [f"status {'stationary' if self.stationary else 'not-stationary'} tol {self.tol:.3e}"]
        for key, val in self.residuals.items():
            lines.append(f"residual {key} {val:.17g}")
        for key, val in sorted(self.branches.items()):
            lines.append(f"branch {key} {val}")
        lines.extend(f"note {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def _pixel_param(param, m):
    if param is None:
        return None
    if param.dofs.size and param.lift().size != m:
        raise ShapeMismatch("parameter field does not match the grid")
    return param


def check_m_stationarity(problems, solutions, grad_js, params=None, tol=1e-6,
                         partitions=None, max_exhaustive=12):
    """Certify the M-stationarity system at a bilevel candidate.

    Parameters
    ----------
    problems : DenoiseProblem or list
        One lower-level problem per training pair (same grid and terms).
    solutions : DenoiseSolution or list
        Converged lower-level solutions.
    grad_js : ndarray or list
        Gradients of the upper-level loss at each ``u``.
    params : list of ParamField, optional
        Parameter map of each term; per-pixel if omitted.
    tol : float
        Every residual must be at most ``tol`` for a stationary verdict.
    max_exhaustive : int
        Enumerate all branch combinations when the number of biactive and
        triactive rows is at most this; otherwise choose per index
        greedily.

    Notes
    -----
    The multiplier of the constraint ``dofs >= 0`` is reported as
    ``rho = -P^T vartheta``. It must lie in the normal cone of the
    nonnegative orthant, i.e. ``rho <= 0`` with ``rho = 0`` on positive
    dofs; the residual ``max |min(dofs, -rho)|`` measures this.
    """
    problems = _as_list(problems)
    solutions = _as_list(solutions)
    grad_js = [np.asarray(g, float).ravel() for g in _as_list(grad_js)]
    n_terms = len(problems[0].terms)
    m = problems[0].m
    if params is None:
        from .params import ParamField
        params = [ParamField.perpixel(problems[0].shape, a) for a in problems[0].alphas]
    params = [_pixel_param(pf, m) for pf in _as_list(params)]
    if len(params) != n_terms:
        raise ShapeMismatch("one parameter field per term is required")
    if partitions is None:
        partitions = [[classify(sol.u, q, a, op)
                       for op, a, q in zip(prob.operators, prob.alphas, sol.duals)]
                      for prob, sol in zip(problems, solutions)]

    lower = [primal_dual_residual(prob, sol) for prob, sol in zip(problems, solutions)]
    residuals_lower = {
        "lower_stationarity": max(r.stationarity for r in lower),
        "lower_complementarity": max(r.complementarity for r in lower),
        "lower_dual_feasibility": max(r.dual_feasibility for r in lower),
    }

    # disjunctive rows: (pair, term, row); option 0 = (K p)_j = 0, option 1 = relaxed
    choice_rows = []
    for k, parts in enumerate(partitions):
        for t, part in enumerate(parts):
            for j in np.flatnonzero(part.biactive | part.triactive):
                choice_rows.append((k, t, int(j)))

    def evaluate(options):
        return _certify_branches(problems, solutions, grad_js, params, partitions,
                                 choice_rows, options)

    n_choice = len(choice_rows)
    exhaustive = n_choice <= max_exhaustive
    best = None
    if exhaustive:
        for options in itertools.product((0, 1), repeat=n_choice):
            cand = evaluate(options)
            if best is None or cand[0] < best[0]:
                best = cand
            if best[0] <= 0.0:
                break
    else:
        options = [0] * n_choice
        best = evaluate(options)
        improved = True
        while improved:
            improved = False
            for i in range(n_choice):
                trial = list(options)
                trial[i] = 1 - trial[i]
                cand = evaluate(trial)
                if cand[0] < best[0]:
                    best, options, improved = cand, trial, True
    score, p_list, mu_list, theta_list, rho, res, branches = best
    residuals = dict(residuals_lower)
    residuals.update(res)
    cert = MStationarityCertificate(p_list, mu_list, theta_list, rho, residuals, branches,
                                    tol, exhaustive)
    if not cert.stationary and n_choice:
        cert.notes.append("no branch combination meets the tolerance")
    return cert


def _certify_branches(problems, solutions, grad_js, params, partitions, choice_rows, options):
    n_terms = len(params)
    relaxed = {}
    for (k, t, j), opt in zip(choice_rows, options):
        relaxed[(k, t, j)] = opt
    p_list, mu_list, theta_list = [], [], []
    res_adj = res_inactive = res_zero = res_span = 0.0
    # per-term, per-dof aggregation of vartheta
    fixed_sum = [np.zeros(pf.p) for pf in params]
    lo_sum = [np.zeros(pf.p) for pf in params]
    hi_sum = [np.zeros(pf.p) for pf in params]
    free_rows = []
    branches = {}
    for k, (prob, sol, gj, parts) in enumerate(zip(problems, solutions, grad_js, partitions)):
        ops = prob.operators
        u = sol.u
        grads = [apply_K(op, u) for op in ops]
        zero_rows, span_rows = [], []
        for t, part in enumerate(parts):
            z = part.strongly_active.copy()
            s = np.zeros_like(z)
            for j in np.flatnonzero(part.biactive):
                if relaxed[(k, t, j)]:
                    s[j] = True
                    branches[f"pair{k}.term{t}.row{j}"] = "biactive-span"
                else:
                    z[j] = True
                    branches[f"pair{k}.term{t}.row{j}"] = "biactive-zero"
            for j in np.flatnonzero(part.triactive):
                if relaxed[(k, t, j)]:
                    branches[f"pair{k}.term{t}.row{j}"] = "triactive-free"
                else:
                    z[j] = True
                    branches[f"pair{k}.term{t}.row{j}"] = "triactive-zero"
            zero_rows.append(z)
            span_rows.append(s)
        system = LinearizedSystem(prob.m, ops, prob.alphas, grads, sol.duals,
                                  [p.inactive for p in parts], zero_rows, span_rows)
        p = system.solve(gj)
        kps = [apply_K(op, p) for op in ops]
        # mu fixed on I (curvature), zero on I_0 and relaxed T; free elsewhere
        mus, cols = [], []
        r0 = p - gj
        for t, (op, a, g, q, kp, part) in enumerate(zip(ops, prob.alphas, grads, sol.duals,
                                                       kps, parts)):
            mu = np.zeros_like(q)
            ina = part.inactive
            if np.any(ina):
                blocks = curvature_blocks(g, a, ina)
                mu[ina] = -np.einsum("jab,jb->ja", blocks[ina], kp[ina])
            r0 = r0 - apply_KT(op, mu)
            mus.append(mu)
            # free directions: full on zero rows, orthogonal to q on span rows
            for j in np.flatnonzero(zero_rows[t]):
                cols.append((t, j, np.array([1.0, 0.0])))
                cols.append((t, j, np.array([0.0, 1.0])))
            for j in np.flatnonzero(span_rows[t]):
                qq = q[j] / np.linalg.norm(q[j])
                cols.append((t, j, np.array([-qq[1], qq[0]])))
        if cols:
            data, rr, cc = [], [], []
            for c, (t, j, d) in enumerate(cols):
                e = np.zeros((ops[t].n, 2))
                e[j] = d
                col = apply_KT(ops[t], e)
                nz = np.flatnonzero(col)
                data.extend(col[nz])
                rr.extend(nz)
                cc.extend([c] * nz.size)
            bmat = sp.csr_matrix((data, (rr, cc)), shape=(prob.m, len(cols)))
            coef = spla.lsqr(bmat, r0, atol=1e-15, btol=1e-15, iter_lim=20 * len(cols) + 100)[0]
            for c, (t, j, d) in enumerate(cols):
                mus[t][j] += coef[c] * d
            r0 = r0 - bmat @ coef
        res_adj = max(res_adj, float(np.linalg.norm(r0)))
        thetas = []
        for t, (op, a, g, q, kp, mu, part, pf) in enumerate(zip(ops, prob.alphas, grads, sol.duals,
                                                               kps, mus, parts, params)):
            gn = row_norms(g)
            kpn = row_norms(kp)
            theta = np.zeros(op.n)
            ina = part.inactive
            if np.any(ina):
                blocks = curvature_blocks(g, a, ina)
                res_inactive = max(res_inactive, float(np.max(np.abs(
                    mu[ina] + np.einsum("jab,jb->ja", blocks[ina], kp[ina])), initial=0.0)))
                theta[ina] = -np.sum(g[ina] * kp[ina], axis=1) / gn[ina]
            res_zero = max(res_zero, float(np.max(kpn[zero_rows[t]], initial=0.0)))
            sp_rows = span_rows[t]
            if np.any(sp_rows):
                qq = q[sp_rows] / row_norms(q[sp_rows])[:, None]
                along = np.sum(kp[sp_rows] * qq, axis=1)
                res_span = max(res_span, float(np.max(row_norms(kp[sp_rows] - along[:, None] * qq))))
                res_span = max(res_span, float(np.max(np.abs(np.sum(mu[sp_rows] * qq, axis=1)))))
            labels = pf.labels
            # fixed vartheta: I from the formula; A_s, zero branches are 0
            np.add.at(fixed_sum[t], labels, theta)
            # free vartheta ranges: span rows (any real), relaxed T (<= |Kp|),
            # I_0 (<= -<Ku,Kp>/|Ku|)
            lo = np.zeros(op.n)
            hi = np.zeros(op.n)
            lo[sp_rows] = -np.inf
            hi[sp_rows] = np.inf
            t_free = part.triactive & ~zero_rows[t]
            lo[t_free] = -np.inf
            hi[t_free] = kpn[t_free]
            z0 = part.zero_inactive
            if np.any(z0):
                lo[z0] = -np.inf
                hi[z0] = -np.sum(g[z0] * kp[z0], axis=1) / gn[z0]
                res_inactive = max(res_inactive, float(np.max(row_norms(mu[z0]), initial=0.0)))
            np.add.at(lo_sum[t], labels, lo)
            np.add.at(hi_sum[t], labels, hi)
            free_rows.append((t, theta, lo, hi, labels))
            thetas.append(theta)
        p_list.append(p)
        mu_list.append(mus)
        theta_list.append(thetas)
    # parameter-space multiplier: rho = -sum P^T vartheta, with the free part
    # chosen to best satisfy 0 <= dofs, -rho >= 0, dofs * rho = 0
    rho_all, res_comp = [], 0.0
    target_all = []
    for t, pf in enumerate(params):
        dofs = pf.dofs
        fixed, lo, hi = fixed_sum[t], lo_sum[t], hi_sum[t]
        # pick s in [fixed+lo, fixed+hi]: 0 if possible, else nearest
        s = np.clip(0.0, fixed + lo, fixed + hi)
        s = np.where(dofs > 0, s, np.minimum(np.maximum(s, 0.0), fixed + hi))
        rho = -s
        res_comp = max(res_comp, float(np.max(np.abs(np.minimum(dofs, -rho)), initial=0.0)))
        rho_all.append(rho)
        target_all.append(s)
    _distribute_free(free_rows, fixed_sum, target_all, params)
    rho = np.concatenate(rho_all)
    res = {
        "adjoint": res_adj,
        "cone_inactive": res_inactive,
        "cone_zero_rows": res_zero,
        "cone_biactive_span": res_span,
        "parameter_complementarity": res_comp,
    }
    score = max(res.values())
    return score, p_list, mu_list, theta_list, rho, res, branches


def _distribute_free(free_rows, fixed_sum, targets, params):
    """Spread each dof's free vartheta budget over its free rows in place."""
    need = [tgt - fx for tgt, fx in zip(targets, fixed_sum)]
    for t, theta, lo, hi, labels in free_rows:
        free = np.isfinite(hi) | np.isfinite(lo)
        free &= (lo < hi) | (lo == -np.inf)
        for j in np.flatnonzero(free):
            cell = labels[j]
            want = need[t][cell]
            val = float(np.clip(want, lo[j], hi[j]))
            theta[j] = val
            need[t][cell] -= val
