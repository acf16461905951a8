"""Dense real linear algebra for desk-scale matrices.

Provides column-pivoted Householder QR (Businger & Golub 1965, with the
squared-norm downdating safeguard of LAPACK's xGEQP3 / LAWN 176), a
literal greedy-projection pivot oracle for testing the pivot rule, a
one-sided Jacobi SVD, and PCA. Everything operates on 2-D float64 arrays,
is deterministic for identical input, and holds no global state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DomainError

# Candidate residual norms within this relative window of the current best
# are treated as tied; ties resolve to the smallest original column index.
PIVOT_TIE_REL = 1e-12

# Residual norms below this fraction of the largest original column norm
# are snapped to exactly zero. Both `rrqr` and `greedy_pivot_oracle` apply
# the same rule, so the two pick identical pivots on rank-deficient and
# duplicate-column input where the true residual is zero up to roundoff.
PIVOT_ZERO_REL = 1e-12

# Downdated squared norms are recomputed from the trailing block once they
# fall below (1e-6)^2 of their reference value (catastrophic-cancellation
# guard; reference is reset after each recompute).
_DOWNDATE_GUARD = 1e-12

_JACOBI_TOL = 1e-14


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate and return a nonempty, finite, 2-D float64 array."""
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise DomainError(f"{name} must be nonempty")
    if not np.isfinite(arr).all():
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def perm_matrix(perm) -> np.ndarray:
    """Permutation matrix P with (W @ P)[:, i] = W[:, perm[i]]."""
    perm = np.asarray(perm)
    return np.eye(perm.size)[:, perm]


@dataclass
class RrqrFactorization:
    """Pivoted QR triple: w[:, perm] == q @ r with nonnegative R diagonal.

    q is the thin d x m factor (m = min(d, k)) with orthonormal columns,
    r is m x k upper triangular with |r[i,i]| nonincreasing, and perm[i]
    is the original column index of the i-th pivoted direction.
    """

    q: np.ndarray
    r: np.ndarray
    perm: np.ndarray

    @property
    def m(self) -> int:
        return self.q.shape[1]


def _select_pivot(norms: np.ndarray, orig_idx: np.ndarray) -> int | None:
    """Position of the pivot among candidates, or None when all are zero.

    `norms` are residual norms (already snapped to zero below the noise
    floor); `orig_idx` the corresponding original column indices. Within a
    relative window of PIVOT_TIE_REL around the best norm, the smallest
    original index wins.
    """
    best = norms.max()
    if best == 0.0:
        return None
    tied = np.flatnonzero(norms >= best - PIVOT_TIE_REL * best)
    return int(tied[np.argmin(orig_idx[tied])])


def rrqr(w) -> RrqrFactorization:
    """Column-pivoted Householder QR with greedy residual-norm pivoting.

    At each elimination step the remaining column with the largest norm
    after projection onto the orthogonal complement of the selected span
    is chosen (Businger-Golub). Residual norms are tracked by downdating
    with a from-scratch recompute whenever cancellation could have eaten
    the running value. Householder reflectors are sign-fixed so the
    diagonal of R is nonnegative, making the factors unique.
    """
    w = as_matrix(w, "w")
    d, k = w.shape
    m = min(d, k)

    a = w.copy()
    q = np.eye(d)
    perm = np.arange(k)
    norms2 = np.einsum("ij,ij->j", a, a)
    ref2 = norms2.copy()
    scale = float(np.sqrt(norms2.max()))
    zero_tol = PIVOT_ZERO_REL * scale

    t = 0
    while t < m:
        for j in range(t, k):
            if norms2[j] > 0.0 and norms2[j] < _DOWNDATE_GUARD * ref2[j]:
                norms2[j] = float(a[t:, j] @ a[t:, j])
                ref2[j] = norms2[j] if norms2[j] > 0.0 else 1.0

        cand = np.sqrt(np.maximum(norms2[t:], 0.0))
        cand[cand <= zero_tol] = 0.0
        pos = _select_pivot(cand, perm[t:])
        if pos is None:
            # Remaining columns are numerically dependent on the selected
            # span; zero the noise block and stop eliminating.
            a[t:, t:] = 0.0
            break
        p = t + pos

        # Exact residual norm of the chosen column; re-pick if the
        # downdated estimate was stale enough to hide a zero column.
        true2 = float(a[t:, p] @ a[t:, p])
        if np.sqrt(true2) <= zero_tol:
            norms2[p] = 0.0
            continue
        norms2[p] = true2
        ref2[p] = true2

        if p != t:
            a[:, [t, p]] = a[:, [p, t]]
            perm[[t, p]] = perm[[p, t]]
            norms2[[t, p]] = norms2[[p, t]]
            ref2[[t, p]] = ref2[[p, t]]

        x = a[t:, t]
        normx = float(np.linalg.norm(x))
        s = 1.0 if x[0] >= 0.0 else -1.0
        v = x.copy()
        v[0] += s * normx
        beta = 2.0 / float(v @ v)
        a[t:, t:] -= np.outer(beta * v, v @ a[t:, t:])
        a[t, t] = -s * normx
        a[t + 1 :, t] = 0.0
        q[:, t:] -= np.outer(q[:, t:] @ v, beta * v)

        norms2[t + 1 :] -= a[t, t + 1 :] ** 2
        np.maximum(norms2[t + 1 :], 0.0, out=norms2[t + 1 :])
        t += 1

    if t < k:
        # Columns never pivoted into the elimination (zero residual, or the
        # k - m surplus of a wide matrix) rank ascending by original index,
        # matching the greedy rule's tie-break.
        order = np.argsort(perm[t:], kind="stable")
        perm[t:] = perm[t:][order]
        a[:, t:] = a[:, t:][:, order]

    r = np.triu(a[:m, :])
    for i in range(m):
        if r[i, i] < 0.0:
            r[i, :] = -r[i, :]
            q[:, i] = -q[:, i]
    return RrqrFactorization(q=q[:, :m].copy(), r=r, perm=perm)


def greedy_pivot_oracle(w) -> np.ndarray:
    """Pivot order by the literal greedy rule, recomputed from scratch.

    At each step, every unselected column of the original matrix is
    projected onto an orthonormal basis of the already-selected columns
    (Gram-Schmidt with one re-orthogonalization pass, rebuilt every step)
    and the column with the largest residual 2-norm wins; ties within
    PIVOT_TIE_REL relative go to the smallest original index. Intended as
    a test oracle for `rrqr`, sharing none of its downdating machinery.
    """
    w = as_matrix(w, "w")
    d, k = w.shape
    scale = float(np.linalg.norm(w, axis=0).max())
    zero_tol = PIVOT_ZERO_REL * scale

    order: list[int] = []
    remaining = list(range(k))
    for _ in range(k):
        basis: list[np.ndarray] = []
        for idx in order:
            v = w[:, idx].copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            n = float(np.linalg.norm(v))
            if n > zero_tol:
                basis.append(v / n)

        norms = np.empty(len(remaining))
        for pos, j in enumerate(remaining):
            v = w[:, j].copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            n = float(np.linalg.norm(v))
            norms[pos] = 0.0 if n <= zero_tol else n

        pos = _select_pivot(norms, np.asarray(remaining))
        chosen = remaining[pos] if pos is not None else remaining[0]
        order.append(chosen)
        remaining.remove(chosen)
    return np.asarray(order)


@dataclass
class SvdFactorization:
    """Thin SVD: u @ diag(sigma) @ v.T reconstructs the input.

    u is d x m and v is k x m (m = min(d, k)), both with orthonormal
    columns; sigma is nonincreasing and nonnegative.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def svd(w, max_sweeps: int = 60) -> SvdFactorization:
    """One-sided Jacobi SVD for small dense matrices.

    Columns of the working matrix are rotated pairwise (cyclic order)
    until all pairs are orthogonal to relative tolerance; quadratic
    convergence makes the default sweep cap generous for desk scale.
    """
    w = as_matrix(w, "w")
    d, k = w.shape
    if d >= k:
        u, sigma, v = _jacobi_svd_tall(w, max_sweeps)
        return SvdFactorization(u=u, sigma=sigma, v=v)
    vt, sigma, ut = _jacobi_svd_tall(w.T.copy(), max_sweeps)
    return SvdFactorization(u=ut, sigma=sigma, v=vt)


def _noise_cut(shape: tuple[int, int], colmax: float) -> float:
    return max(shape) * np.finfo(float).eps * colmax


def _jacobi_svd_tall(a: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, p = a.shape
    g = a.copy()
    v = np.eye(p)

    for sweep in range(max_sweeps + 1):
        # Columns at the numerical noise floor are frozen: they end up as
        # exact zero singular values, and rotating noise against noise
        # never settles below the relative tolerance.
        norms = np.linalg.norm(g, axis=0)
        cut = _noise_cut((n, p), float(norms.max()))
        active = np.flatnonzero(norms > cut)
        ga = g[:, active]
        gram = ga.T @ ga
        diag = np.sqrt(np.maximum(np.diag(gram), 0.0))
        bound = np.outer(diag, diag)
        off = np.abs(gram - np.diag(np.diag(gram)))
        if np.all(off <= _JACOBI_TOL * np.maximum(bound, 1e-300)):
            break
        if sweep == max_sweeps:
            raise ConvergenceError(
                f"jacobi SVD did not converge within {max_sweeps} sweeps"
            )
        for ii in range(active.size - 1):
            for jj in range(ii + 1, active.size):
                i = active[ii]
                j = active[jj]
                gi = g[:, i]
                gj = g[:, j]
                app = float(gi @ gi)
                bqq = float(gj @ gj)
                apq = float(gi @ gj)
                denom = np.sqrt(app * bqq)
                if denom <= 0.0 or abs(apq) <= _JACOBI_TOL * denom:
                    continue
                zeta = (bqq - app) / (2.0 * apq)
                if zeta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * gi - s * gj
                new_j = s * gi + c * gj
                g[:, i] = new_i
                g[:, j] = new_j
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]

    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    cut = _noise_cut((n, p), sigma[0] if sigma.size else 0.0)
    u = np.zeros((n, p))
    dead: list[int] = []
    for i in range(p):
        if sigma[i] > cut:
            u[:, i] = g[:, i] / sigma[i]
        else:
            sigma[i] = 0.0
            dead.append(i)
    if dead:
        _complete_basis(u, dead)
    return u, sigma, v


def _complete_basis(u: np.ndarray, dead: list[int]) -> None:
    """Fill the listed columns of u with an orthonormal completion.

    Greedy over standard basis vectors, taking the candidate with the
    largest residual after projecting out the current columns; the
    largest residual is always bounded away from zero, so this cannot
    stall.
    """
    n = u.shape[0]
    for slot in dead:
        best_vec = None
        best_norm = -1.0
        for cand in range(n):
            vec = np.zeros(n)
            vec[cand] = 1.0
            for _ in range(2):
                vec -= u @ (u.T @ vec)
            nv = float(np.linalg.norm(vec))
            if nv > best_norm:
                best_norm = nv
                best_vec = vec
        u[:, slot] = best_vec / best_norm


class PcaResult(NamedTuple):
    scores: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def pca_project(x, n_components: int) -> PcaResult:
    """Project rows of x onto the top principal directions.

    Columns of `components` are the leading right singular vectors of the
    row-mean-centered data; `scores = centered_x @ components`;
    `explained_variance` uses the (rows - 1) normalization.
    """
    x = as_matrix(x, "x")
    n, p = x.shape
    if n < 2:
        raise DomainError("pca_project needs at least 2 rows")
    if not 1 <= n_components <= min(n - 1, p):
        raise DomainError(
            f"n_components must be in [1, {min(n - 1, p)}], got {n_components}"
        )
    centered = x - x.mean(axis=0)
    fac = svd(centered)
    components = fac.v[:, :n_components].copy()
    scores = centered @ components
    explained = fac.sigma[:n_components] ** 2 / (n - 1)
    return PcaResult(scores=scores, components=components, explained_variance=explained)
