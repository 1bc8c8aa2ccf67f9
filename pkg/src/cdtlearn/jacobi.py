"""Cyclic Jacobi eigendecomposition for small symmetric matrices.

Used for diagnostics only (spectra of pair covariances); nothing here is
differentiable.
"""

import numpy as np

from .errors import ContractError, ConvergenceError

SYMMETRY_TOL = 1e-9


def _off_norm(a):
    # direct sum: subtracting the diagonal mass from the total cancels badly
    off = a - np.diag(np.diag(a))
    return np.sqrt(np.sum(off * off))


def sym_eig(m, tol=1e-12, max_sweeps=100):
    """Eigen-decompose a symmetric matrix.

    Returns ``(w, V)`` with eigenvalues ``w`` in descending order and the
    matching orthonormal eigenvectors as the columns of ``V``, so that
    ``V @ diag(w) @ V.T`` reconstructs ``m``.

    Sweeps stop once the off-diagonal Frobenius mass falls below
    ``tol * max(1, ||m||_F)``.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"sym_eig needs a square matrix, got shape {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
        raise ContractError("sym_eig input is not symmetric")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    limit = tol * max(1.0, np.linalg.norm(a))

    for _ in range(max_sweeps):
        if _off_norm(a) < limit:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) plane rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        if _off_norm(a) >= limit:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]
