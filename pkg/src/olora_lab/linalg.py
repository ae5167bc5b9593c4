"""Dense matrix substrate: checked products, Householder thin QR, Jacobi SVD.

A "matrix" here is simply a 2-D numpy array. float32 is used for training,
float64 for verification; every routine keeps the dtype it is given.
"""

import numpy as np

from .errors import NumericError, RankError, ShapeError, SizeError

SVD_MAX_DIM = 256
SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 80


def as_matrix(data, dtype=None):
    """Validate and return ``data`` as a finite 2-D array."""
    m = np.asarray(data, dtype=dtype)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    return m


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m):
    m = np.asarray(m)
    return float(np.sqrt(np.sum(np.square(m, dtype=np.float64))))


def thin_qr(w, r):
    """Rank-``r`` truncation of the Householder QR factorization of ``w``.

    Returns ``(q_r, r_r)`` with ``q_r`` of shape (m, r) having orthonormal
    columns and ``r_r`` of shape (r, n), equal to the leading r columns / rows
    of the full factorization. Signs are fixed so diag(r_r) >= 0. Only r
    reflections are formed, so the cost is O(m n r).
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"thin_qr expects a 2-D matrix, got shape {w.shape}")
    m, n = w.shape
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(m, n):
        raise RankError(f"rank {r} outside [1, {min(m, n)}] for a {m}x{n} matrix")
    if not np.all(np.isfinite(w)):
        raise NumericError("thin_qr input has non-finite entries")

    dtype = w.dtype if w.dtype in (np.float32, np.float64) else np.float64
    a = np.array(w, dtype=dtype)
    vs = []
    for j in range(r):
        x = a[j:, j]
        normx = np.sqrt(np.dot(x, x))
        if normx == 0.0:
            vs.append(None)
            continue
        v = x.copy()
        # reflect onto -sign(x0)|x| e1 to avoid cancellation
        v[0] += normx if x[0] >= 0 else -normx
        v /= np.sqrt(np.dot(v, v))
        vs.append(v)
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
    r_r = np.triu(a[:r, :])

    q = np.eye(m, r, dtype=dtype)
    for j in range(r - 1, -1, -1):
        v = vs[j]
        if v is None:
            continue
        # columns left of j are still unit vectors with zeros in rows j:
        q[j:, j:] -= 2.0 * np.outer(v, v @ q[j:, j:])

    signs = np.where(np.diag(r_r) < 0, -1.0, 1.0).astype(dtype)
    q_r = q * signs[None, :]
    r_r = r_r * signs[:, None]
    return q_r, r_r


def _round_robin(n):
    """Rounds of disjoint column pairs covering every pair exactly once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(p), max(p)) for p in pairs if -1 not in p]
        rounds.append((np.array([p[0] for p in pairs], dtype=int),
                       np.array([p[1] for p in pairs], dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def svd_values(m, tol=SVD_TOL):
    """Singular values by one-sided (Hestenes) Jacobi, sorted nonincreasing.

    Columns are orthogonalized pairwise until every pair satisfies
    |a_i . a_j| <= tol * |a_i| |a_j|; the singular values are then the column
    norms. Disjoint pairs are rotated together, one round-robin round at a time.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"svd_values expects a 2-D matrix, got shape {m.shape}")
    if min(m.shape) > SVD_MAX_DIM:
        raise SizeError(f"svd_values limited to min dimension {SVD_MAX_DIM}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd_values input has non-finite entries")

    a = m.T.copy() if m.shape[0] < m.shape[1] else m.copy()
    n = a.shape[1]
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for i, j in rounds:
            ai = a[:, i]
            aj = a[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            i, j = i[active], j[active]
            ai, aj = ai[:, active], aj[:, active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, i] = c * ai - s * aj
            a[:, j] = s * ai + c * aj
        if not rotated:
            break
    else:
        raise NumericError("Jacobi SVD did not converge")
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    return np.sort(sigma)[::-1]
