"""Dense matrix/vector primitives: seeded Gaussian sampling, norms,
projections onto orthogonal complements, and a truncated SVD.

All arrays are float64 ndarrays. Everything here is a pure function of its
inputs except the generators returned by make_rng/derive_rng, which are
single-owner mutable state.
"""

from __future__ import annotations

import numpy as np

from .errors import BadRange, NotUnit, RankTooLarge, ZeroVector

# Norms below this are treated as zero when normalizing.
TOL_ZERO = 1e-14

_UNIT_TOL = 1e-9


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: same seed gives a bit-identical stream."""
    return np.random.default_rng(seed)


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Child generator keyed on (seed, *path), e.g. (seed, client, round).

    SeedSequence hashes the full key, so distinct paths give independent
    streams and the derivation is reproducible across runs and platforms.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with i.i.d. standard normal entries from rng."""
    if rows < 1 or cols < 1:
        raise BadRange(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    return rng.standard_normal((rows, cols))


def frob_norm(m: np.ndarray) -> float:
    """Frobenius norm (l2 norm for vectors)."""
    return float(np.linalg.norm(m))


def unit_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||, raising ZeroVector when ||v|| <= TOL_ZERO."""
    n = np.linalg.norm(v)
    if n <= TOL_ZERO:
        raise ZeroVector(f"cannot normalize vector with norm {n:.3e}")
    return v / n

def _require_unit(v: np.ndarray, name: str) -> None:
    n = np.linalg.norm(v)
    if abs(n - 1.0) > _UNIT_TOL:
        raise NotUnit(f"{name} must be a unit vector, got norm {n!r}")


def angle_distance(u: np.ndarray, v: np.ndarray) -> float:
    """|sin theta(u, v)| = ||(I - u u^T) v|| for unit vectors u, v.

    Symmetric in its arguments and zero iff u = +/-v.
    """
    _require_unit(u, "u")
    _require_unit(v, "v")
    return float(np.linalg.norm(v - u * (u @ v)))


def projector_orth(u: np.ndarray) -> np.ndarray:
    """Projection matrix I - u u^T onto the complement of unit vector u."""
    _require_unit(u, "u")
    return np.eye(u.shape[0]) - np.outer(u, u)


def _jacobi_eigh(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue.
    Kept free of LAPACK's SVD path so tests can use numpy's SVD as an
    independent oracle.
    """
    a = np.array(s, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(1.0, float(np.abs(np.diag(a)).max(initial=0.0)))
    for _ in range(100):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) if tau != 0 else 1.0
                t = t / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * c
                rot = np.array([[c, sn], [-sn, c]])
                a[[p, q], :] = rot.T @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals)
    return vals[order], v[:, order]


def _fill_orthonormal(u: np.ndarray, start: int) -> None:
    """Replace columns start.. of u with vectors orthonormal to the rest."""
    d, r = u.shape
    col = start
    for j in range(d):
        if col >= r:
            return
        cand = np.zeros(d)
        cand[j] = 1.0
        for k in range(col):
            cand -= u[:, k] * (u[:, k] @ cand)
        n = np.linalg.norm(cand)
        if n > 0.5:
            u[:, col] = cand / n
            col += 1
    if col < r:  # pragma: no cover - d >= r always leaves enough basis vectors
        raise RankTooLarge("could not complete an orthonormal basis")


def truncated_svd(m: np.ndarray, r: int, max_iter: int = 200,
                  tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-r factorization of m via subspace iteration.

    Returns (u, s, v) with u: rows x r, v: cols x r orthonormal columns and
    s: nonnegative, non-increasing, such that u @ diag(s) @ v.T is the best
    Frobenius rank-r approximation of m.

    Subspace iteration with QR re-orthonormalization is run on the right
    singular subspace from a fixed-seed start, followed by a Rayleigh-Ritz
    projection diagonalized with a Jacobi sweep. The sign of each left
    singular vector is fixed so its largest-magnitude entry is nonnegative,
    which makes downstream SVD-based aggregation deterministic.
    """
    m = np.asarray(m, dtype=float)
    rows, cols = m.shape
    if r < 1 or r > min(rows, cols):
        raise RankTooLarge(f"rank {r} not in [1, min{(rows, cols)}]")

    start = np.random.default_rng(0x5EED).standard_normal((cols, r))
    v, _ = np.linalg.qr(start)
    for _ in range(max_iter):
        w = m @ v
        v_new, _ = np.linalg.qr(m.T @ w)
        overlap = v_new.T @ v
        change = np.sqrt(max(r - float(np.sum(overlap**2)), 0.0))
        v = v_new
        if change < tol:
            break

    w = m @ v
    lam, z = _jacobi_eigh(w.T @ w)
    s = np.sqrt(np.clip(lam, 0.0, None))
    v = v @ z
    u = w @ z
    cutoff = max(s[0], 1.0) * 1e-13
    n_pos = int(np.sum(s > cutoff))
    for k in range(n_pos):
        u[:, k] /= s[k]
    s[n_pos:] = 0.0
    _fill_orthonormal(u, n_pos)

    for k in range(r):
        lead = np.argmax(np.abs(u[:, k]))
        if u[lead, k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return u, s, v
