"""Attention masks derived from fusion systems, and their projection.

The mask entry ``M[i, j]`` aggregates the fusion channels of the ordered
token-type pair ``(i, j)``, counting only channels whose per-triple pentagon
defect is below a cell tolerance:

    M[i, j] = clip( sum_k F[k, i, j] * [ |defect(i, j, k)| <= cell_tol ], 0, 1 )

Cells that come out exactly zero at build time form the *hard-forbidden*
pattern; no later update may revive them.  Gradient updates to the mask are
applied through :func:`project_mask`, an alternating projection: clip to the
box, restore hard zeros, then damped least-squares steps on the underlying
channel weights until the system's pentagon residual is back under the
mask's consistency tolerance.

The mask also induces the metric used by the flow-matching loss: a
symmetrised, Kronecker-lifted, jittered positive-definite weight matrix
(:func:`lift_norm_weight`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fusion import FusionSystem, pentagon_cells, pentagon_residual

__all__ = [
    "MaskProjectionError",
    "JitterError",
    "TopoMask",
    "NormWeight",
    "build_mask",
    "neutral_mask",
    "project_mask",
    "lift_norm_weight",
    "expand_mask",
]

# Lower bound projection nudges allowed (non-hard-zero) entries up to when
# consistency permits, so an allowed transition can be down-weighted without
# becoming indistinguishable from a structural zero.
CELL_FLOOR = 1e-3

MODE_LITERAL = "literal"
MODE_HARD = "hard"


class MaskProjectionError(RuntimeError):
    """The residual-correction loop could not reach the mask tolerance."""

    def __init__(self, residual: float, tol: float, iterations: int):
        super().__init__(
            f"mask projection stalled at pentagon residual {residual:.3e} "
            f"(tolerance {tol:.3e}) after {iterations} iterations"
        )
        self.residual = residual
        self.tol = tol
        self.iterations = iterations


class JitterError(RuntimeError):
    """The lifted norm weight failed its definiteness check; raise eps_pd."""


@dataclass(frozen=True)
class TopoMask:
    """Token-type attention mask with its generating channel weights.

    Attributes
    ----------
    values : ndarray of shape (T, T)
        Mask entries in [0, 1] over T token types.
    hard_zeros : ndarray of bool, shape (T, T)
        Build-time zero pattern; these cells stay exactly 0 forever.
    tol_consistency : float
        Pentagon-residual bound maintained by every projection.
    cell_tol : float
        Per-triple defect threshold used when aggregating channels.
    mode : str
        "hard" (forbidden cells excluded from attention) or "literal"
        (mask multiplies logits only).
    channel_weights : ndarray of shape (T, T, T)
        Current working copy of the fusion tensor generating the mask.
    """

    values: np.ndarray
    hard_zeros: np.ndarray
    tol_consistency: float
    cell_tol: float
    mode: str
    channel_weights: np.ndarray

    def __post_init__(self):
        for name in ("values", "hard_zeros", "channel_weights"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def n_types(self) -> int:
        return self.values.shape[0]

    def residual(self) -> float:
        """Pentagon residual of the current channel weights."""
        return pentagon_residual(self.channel_weights)


def _mask_values(weights: np.ndarray, cell_tol: float, hard: np.ndarray | None) -> np.ndarray:
    cells = np.abs(pentagon_cells(weights))  # cells[i, j, k]
    consistent = (cells <= cell_tol).transpose(2, 0, 1)  # -> [k, i, j]
    m = np.clip((weights * consistent).sum(axis=0), 0.0, 1.0)
    if hard is not None:
        m[hard] = 0.0
    return m


def build_mask(fs: FusionSystem, cell_tol: float = 1e-9, mode: str = MODE_HARD) -> TopoMask:
    """Build a token-type mask from a fusion system.

    The consistency tolerance of the result is the larger of ``cell_tol``
    and the generating system's own pentagon residual, so projections of
    masks built from environment-derived (inexactly consistent) systems
    guarantee "no worse than built".
    """
    if mode not in (MODE_LITERAL, MODE_HARD):
        raise ValueError(f"unknown mask mode {mode!r}")
    weights = fs.f.copy()
    m = _mask_values(weights, cell_tol, hard=None)
    hard = m == 0.0
    tol = max(cell_tol, pentagon_residual(weights) * (1.0 + 1e-9))
    return TopoMask(
        values=m,
        hard_zeros=hard,
        tol_consistency=tol,
        cell_tol=cell_tol,
        mode=mode,
        channel_weights=weights,
    )


def neutral_mask(n_types: int, mode: str = MODE_LITERAL) -> TopoMask:
    """All-ones mask over ``n_types`` token types.

    Generated by the delta-channel tensor with unit weights, which is
    exactly pentagon-consistent, so the neutral mask is a fixed point of
    :func:`project_mask` under a zero update.  Used by ablations that
    disable transition structure.
    """
    weights = np.zeros((n_types, n_types, n_types))
    for j in range(n_types):
        weights[j, :, j] = 1.0
    return TopoMask(
        values=np.ones((n_types, n_types)),
        hard_zeros=np.zeros((n_types, n_types), dtype=bool),
        tol_consistency=1e-9,
        cell_tol=1e-9,
        mode=mode,
        channel_weights=weights,
    )


def _pentagon_jacobian(f: np.ndarray) -> np.ndarray:
    """Exact Jacobian of the flattened pentagon cells w.r.t. the flattened tensor.

    The defect is quadratic in F, so the Jacobian is linear in F and has a
    closed form; see the derivative terms spelled out inline.
    """
    n = f.shape[0]
    g = f.sum(axis=0)
    eye = np.eye(n)
    # d lhs[i,j,k] / d F[a,b,c] = [b==i][c==j] g[a,k]  +  F[b,i,j] [k==c]
    d_lhs = np.einsum("bi,cj,ak->ijkabc", eye, eye, g)
    d_lhs = d_lhs + np.einsum("bij,kc,a->ijkabc", f, eye, np.ones(n))
    # d rhs[i,j,k] / d F[a,b,c] = [b==i][c==k] g[a,j]  +  F[b,i,k] [j==c]
    d_rhs = np.einsum("bi,ck,aj->ijkabc", eye, eye, g)
    d_rhs = d_rhs + np.einsum("bik,jc,a->ijkabc", f, eye, np.ones(n))
    return (d_lhs - d_rhs).reshape(n**3, n**3)


def _delta_channel_matrix(weights: np.ndarray) -> np.ndarray | None:
    """Return W with weights[k, i, j] == W[i, j] * delta(k == j), else None.

    Delta-channel tensors close the pentagon cells into the pair products
    W[i,j] W[j,k] - W[i,k] W[k,j], so consistency reduction can run over the
    n^2 pair weights instead of the full n^3 tensor and never leaves the
    channel structure.  Every environment-derived system here has this form.
    """
    n = weights.shape[0]
    on_channel = np.zeros(weights.shape, dtype=bool)
    for j in range(n):
        on_channel[j, :, j] = True
    if (weights[~on_channel] != 0.0).any():
        return None
    return np.einsum("jij->ij", weights).copy()


def _pair_cells(w: np.ndarray) -> np.ndarray:
    """Pentagon cells of the delta-channel tensor generated by pair weights."""
    return np.einsum("ij,jk->ijk", w, w) - np.einsum("ik,kj->ijk", w, w)


def _pair_jacobian(w: np.ndarray) -> np.ndarray:
    """Jacobian of the flattened pair cells w.r.t. the flattened pair weights."""
    n = w.shape[0]
    eye = np.eye(n)
    j1 = np.einsum("ia,jb,jk->ijkab", eye, eye, w)
    j2 = np.einsum("ij,ja,kb->ijkab", w, eye, eye)
    j3 = np.einsum("ia,kb,kj->ijkab", eye, eye, w)
    j4 = np.einsum("ik,ka,jb->ijkab", w, eye, eye)
    return (j1 + j2 - j3 - j4).reshape(n**3, n**2)


def _reduce_residual_pairs(
    w: np.ndarray, free: np.ndarray, tol: float, max_iters: int
) -> tuple[np.ndarray, float, int]:
    """Levenberg-Marquardt on the pair weights of a delta-channel tensor.

    Same contract as :func:`_reduce_residual` but the search space is the
    (n, n) pair-weight matrix, so iterates stay delta-channel by
    construction.
    """
    w = w.copy()
    lam = 1e-3
    free_flat = free.reshape(-1)
    best = math.sqrt(float((_pair_cells(w) ** 2).sum()))
    it = 0
    while best > tol and it < max_iters:
        it += 1
        r = _pair_cells(w).reshape(-1)
        j = _pair_jacobian(w)[:, free_flat]
        jtj = j.T @ j
        jtr = j.T @ r
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(jtj.shape[0]), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = w.reshape(-1).copy()
            trial[free_flat] = np.clip(trial[free_flat] + delta, 0.0, 1.0)
            trial = trial.reshape(w.shape)
            res = math.sqrt(float((_pair_cells(trial) ** 2).sum()))
            if res < best:
                w, best = trial, res
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
    return w, best, it


def _reduce_residual(
    weights: np.ndarray, free: np.ndarray, tol: float, max_iters: int
) -> tuple[np.ndarray, float, int]:
    """Damped least-squares (Levenberg-Marquardt) steps on the free entries.

    Minimises the sum of squared pentagon cells subject to the box [0, 1],
    moving only entries flagged in ``free``.  Stops as soon as the Frobenius
    residual drops to ``tol``.
    """
    f = weights.copy()
    lam = 1e-3
    free_flat = free.reshape(-1)
    best = pentagon_residual(f)
    it = 0
    while best > tol and it < max_iters:
        it += 1
        r = pentagon_cells(f).reshape(-1)
        j = _pentagon_jacobian(f)[:, free_flat]
        jtj = j.T @ j
        jtr = j.T @ r
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(jtj.shape[0]), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = f.reshape(-1).copy()
            trial[free_flat] = np.clip(trial[free_flat] + delta, 0.0, 1.0)
            trial = trial.reshape(f.shape)
            res = pentagon_residual(trial)
            if res < best:
                f, best = trial, res
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
    return f, best, it


def project_mask(
    mask: TopoMask,
    fs: FusionSystem,
    update: np.ndarray,
    eta: float,
    max_iters: int = 100,
) -> TopoMask:
    """Apply a gradient-style update to the mask and project back.

    The candidate is ``M + eta * update`` (pass a negative gradient for
    descent).  Projection clips entries to [0, 1], resets hard-forbidden
    cells to exactly 0, rescales the generating channel weights to match,
    and then runs damped least-squares residual-reduction steps until the
    pentagon residual of the working system is at most the mask's
    consistency tolerance.  Raises :class:`MaskProjectionError` if the loop
    cannot get there within ``max_iters`` iterations.

    A projection with ``update == 0`` on an already-consistent mask returns
    the input values unchanged, and projecting twice is idempotent.

    Free (non-hard-zero) entries of delta-channel systems are nudged up to
    a small positive floor after the reduction, provided the nudged matrix
    still meets the consistency tolerance.  Downstream consumers treat an
    exactly zero entry as a structural prohibition (hard attention excludes
    the pair), so "allowed but currently weightless" should stay
    distinguishable from "forbidden"; without the floor an allowed entry
    that descent pushes to the clip boundary is absorbing and no gradient
    flows through it again.  Consistency still wins: when only an exact
    zero satisfies a tight tolerance, the entry is left at zero.
    """
    update = np.asarray(update, dtype=np.float64)
    if update.shape != mask.values.shape:
        raise ValueError(f"update shape {update.shape} != mask shape {mask.values.shape}")
    n = mask.n_types
    candidate = np.clip(mask.values + float(eta) * update, 0.0, 1.0)
    candidate[mask.hard_zeros] = 0.0

    pair_w = _delta_channel_matrix(mask.channel_weights)
    if pair_w is not None:
        # Delta-channel system: the mask values ARE the pair weights, so the
        # candidate seeds the reduction directly and iterates keep the
        # channel structure.
        pair_w, residual, iters = _reduce_residual_pairs(
            candidate, ~mask.hard_zeros, mask.tol_consistency, max_iters
        )
        if residual > mask.tol_consistency:
            raise MaskProjectionError(residual, mask.tol_consistency, iters)
        floored = pair_w.copy()
        floored[~mask.hard_zeros] = np.maximum(floored[~mask.hard_zeros], CELL_FLOOR)
        floored_res = math.sqrt(float((_pair_cells(floored) ** 2).sum()))
        if floored_res <= mask.tol_consistency:
            pair_w = floored
        weights = np.zeros((n, n, n))
        for j in range(n):
            weights[j, :, j] = pair_w[:, j]
    else:
        weights = mask.channel_weights.copy()
        old = mask.values
        cells = np.abs(pentagon_cells(weights)).transpose(2, 0, 1)
        consistent = cells <= mask.cell_tol
        for i in range(n):
            for j in range(n):
                if mask.hard_zeros[i, j] or candidate[i, j] == old[i, j]:
                    continue
                if old[i, j] > 0.0:
                    weights[:, i, j] = weights[:, i, j] * (candidate[i, j] / old[i, j])
                else:
                    channels = np.flatnonzero(consistent[:, i, j])
                    if channels.size == 0:
                        channels = np.arange(n)
                    weights[channels, i, j] = candidate[i, j] / channels.size
        np.clip(weights, 0.0, 1.0, out=weights)

        free = np.ones((n, n, n), dtype=bool)
        free[:, mask.hard_zeros] = False
        weights, residual, iters = _reduce_residual(
            weights, free, mask.tol_consistency, max_iters
        )
        if residual > mask.tol_consistency:
            raise MaskProjectionError(residual, mask.tol_consistency, iters)

    return TopoMask(
        values=_mask_values(weights, mask.cell_tol, mask.hard_zeros),
        hard_zeros=mask.hard_zeros.copy(),
        tol_consistency=mask.tol_consistency,
        cell_tol=mask.cell_tol,
        mode=mask.mode,
        channel_weights=weights,
    )


@dataclass(frozen=True)
class NormWeight:
    """Positive-definite lift of a mask used as a flow-matching metric.

    Attributes
    ----------
    w : ndarray
        The full weight matrix ``sym(M) (x) I_d + jitter * I``.
    eps_pd : float
        Requested definiteness floor; the minimum eigenvalue of ``w`` is at
        least this.
    jitter : float
        The diagonal shift actually applied (``eps_pd`` plus any spectral
        compensation needed when ``sym(M)`` has negative eigenvalues).
    """

    w: np.ndarray
    eps_pd: float
    jitter: float

    def __post_init__(self):
        if np.abs(self.w - self.w.T).max() > 1e-12:
            raise JitterError("lifted norm weight is not symmetric")
        try:
            np.linalg.cholesky(self.w)
        except np.linalg.LinAlgError as err:
            raise JitterError(
                f"Cholesky failed for eps_pd={self.eps_pd}; increase the jitter"
            ) from err
        self.w.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def quadratic(self, v: np.ndarray) -> float:
        """Evaluate ``v^T W v`` for a flat vector ``v``."""
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.dim:
            raise ValueError(f"vector of size {v.size} against weight of dim {self.dim}")
        return float(v @ self.w @ v)


def lift_norm_weight(mask, d_a: int, eps_pd: float = 1e-2) -> NormWeight:
    """Lift a mask to a positive-definite metric over flattened sequences.

    Computes ``S = (M + M^T) / 2``, then ``W = S (x) I_{d_a} + jitter * I``
    where the jitter is ``eps_pd`` plus the spectral shift needed when ``S``
    has negative eigenvalues (mask matrices are not PSD in general).  The
    result satisfies ``lambda_min(W) >= eps_pd``, so the induced quadratic
    form is bounded below by ``eps_pd * ||v||^2``.

    Parameters
    ----------
    mask : TopoMask or ndarray
        Token-type mask, or an already position-expanded square matrix.
    d_a : int
        Per-token action dimensionality for the Kronecker factor.
    """
    m = mask.values if isinstance(mask, TopoMask) else np.asarray(mask, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"mask must be square, got {m.shape}")
    s = 0.5 * (m + m.T)
    lam_min = float(np.linalg.eigvalsh(s)[0])
    jitter = eps_pd + max(0.0, -lam_min)
    w = np.kron(s, np.eye(int(d_a))) + jitter * np.eye(s.shape[0] * int(d_a))
    return NormWeight(w=w, eps_pd=float(eps_pd), jitter=float(jitter))


def expand_mask(mask, token_types: np.ndarray) -> np.ndarray:
    """Expand a token-type mask to sequence positions.

    Position pair ``(s, t)`` receives the mask entry for the transition
    oriented by time: the earlier position's type indexes the row.  The
    diagonal is always 1 (a position may attend itself regardless of
    whether its type may follow itself).

    Parameters
    ----------
    mask : TopoMask or ndarray
        Token-type mask of shape (T, T).
    token_types : ndarray of int
        Type label of each sequence position.
    """
    m = mask.values if isinstance(mask, TopoMask) else np.asarray(mask, dtype=np.float64)
    types = np.asarray(token_types, dtype=np.int64)
    row = m[np.ix_(types, types)]  # row[s, t] = M[type_s, type_t]
    later = np.subtract.outer(np.arange(types.size), np.arange(types.size)) > 0
    out = np.where(later, row.T, row)  # s > t: earlier is t, so M[type_t, type_s]
    np.fill_diagonal(out, 1.0)
    return out
