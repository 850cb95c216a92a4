"""NumPy implementations of the stencil kernels.

Used when the compiled extension is unavailable, or when
``TVB_PURE_PYTHON=1`` is set. Signatures mirror ``_ckernels``.
Scheme codes: 0 forward, 1 backward, 2 centered.
"""
import numpy as np

FORWARD, BACKWARD, CENTERED = 0, 1, 2


def grad(u, scheme, out):
    out[...] = 0.0
    if scheme == FORWARD:
        out[:, :-1, 0] = u[:, 1:] - u[:, :-1]
        out[:-1, :, 1] = u[1:, :] - u[:-1, :]
    elif scheme == BACKWARD:
        out[:, 1:, 0] = u[:, 1:] - u[:, :-1]
        out[1:, :, 1] = u[1:, :] - u[:-1, :]
    elif scheme == CENTERED:
        out[:, 1:-1, 0] = 0.5 * (u[:, 2:] - u[:, :-2])
        out[1:-1, :, 1] = 0.5 * (u[2:, :] - u[:-2, :])
    else:
        raise ValueError(f"unknown scheme code {scheme}")
    return out


def grad_adjoint(q, scheme, out):
    out[...] = 0.0
    px = q[:, :, 0]
    py = q[:, :, 1]
    if scheme == FORWARD:
        out[:, :-1] -= px[:, :-1]
        out[:, 1:] += px[:, :-1]
        out[:-1, :] -= py[:-1, :]
        out[1:, :] += py[:-1, :]
    elif scheme == BACKWARD:
        out[:, 1:] += px[:, 1:]
        out[:, :-1] -= px[:, 1:]
        out[1:, :] += py[1:, :]
        out[:-1, :] -= py[1:, :]
    elif scheme == CENTERED:
        out[:, 2:] += 0.5 * px[:, 1:-1]
        out[:, :-2] -= 0.5 * px[:, 1:-1]
        out[2:, :] += 0.5 * py[1:-1, :]
        out[:-2, :] -= 0.5 * py[1:-1, :]
    else:
        raise ValueError(f"unknown scheme code {scheme}")
    return out


def project_balls(q, radius):
    """Project each row ``q[i, j, :]`` onto the disc of radius ``radius[i, j]``."""
    norm = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2)
    scale = np.ones_like(norm)
    over = norm > radius
    scale[over] = radius[over] / norm[over]
    q *= scale[..., None]
    return q


def pdhg_iterate(f, alpha, schemes, u, ubar, q, tau, sigma, n_iter):
    """Run ``n_iter`` primal-dual steps in place on ``u``, ``ubar`` and ``q``."""
    n_terms = len(schemes)
    tmp = np.empty(u.shape + (2,))
    acc = np.empty_like(u)
    back = np.empty_like(u)
    inv = 1.0 / (1.0 + tau)
    for _ in range(n_iter):
        acc[...] = 0.0
        for t in range(n_terms):
            grad(ubar, schemes[t], tmp)
            q[t] += sigma * tmp
            project_balls(q[t], alpha[t])
            grad_adjoint(q[t], schemes[t], back)
            acc += back
        u_new = (u - tau * acc + tau * f) * inv
        ubar[...] = 2.0 * u_new - u
        u[...] = u_new
