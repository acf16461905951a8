"""Evidence metrics for adapter layers.

Effective rank (entropy of the normalized singular-value distribution),
rank efficiency, Grassmann subspace similarity between the two adapters'
A-row spaces, cosine-similarity structure of the factors, and column-norm
statistics over the pivot-selected columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapter import DualAdapterLinear, LoraAdapter
from .errors import DomainError
from .linalg import as_matrix, pca_project, svd


def effective_rank(w) -> float:
    """exp of the Shannon entropy of sigma / sum(sigma), natural log."""
    w = as_matrix(w, "w")
    sigma = svd(w).sigma
    total = float(sigma.sum())
    if total <= 0.0:
        raise DomainError("effective_rank is undefined for a zero matrix")
    p = sigma / total
    p = p[p > 0.0]
    entropy = -float(np.sum(p * np.log(p)))
    return float(np.exp(entropy))


def rank_efficiency(erank: float, target_rank: int) -> float:
    if target_rank < 1:
        raise DomainError("target_rank must be >= 1")
    return erank / target_rank


def _row_space_basis(a: np.ndarray) -> np.ndarray:
    """Orthonormal basis (k x rank) of the row space, from right singular vectors."""
    fac = svd(a)
    cut = max(a.shape) * np.finfo(float).eps * (fac.sigma[0] if fac.sigma.size else 0.0)
    keep = fac.sigma > cut
    return fac.v[:, keep]


def grassmann_similarity(a_main, a_sub) -> float:
    """||V_main^T V_sub||_F^2 / min(r_main, r_sub) over row-space bases.

    1 for identical subspaces, 0 for orthogonal ones. The bases live in
    the shared input space R^k, so adapters of different rank compare
    directly.
    """
    a_main = as_matrix(a_main, "a_main")
    a_sub = as_matrix(a_sub, "a_sub")
    if a_main.shape[1] != a_sub.shape[1]:
        raise DomainError("a_main and a_sub must share the column dimension")
    if not a_main.any() or not a_sub.any():
        raise DomainError("grassmann_similarity is undefined for a zero matrix")
    v1 = _row_space_basis(a_main)
    v2 = _row_space_basis(a_sub)
    overlap = float(np.linalg.norm(v1.T @ v2) ** 2)
    return overlap / min(a_main.shape[0], a_sub.shape[0])


@dataclass
class CosineStructure:
    heatmap: np.ndarray
    mean_offdiag_abs: float
    zero_vectors: tuple[int, ...]


def cosine_structure(m, axis: str = "rows") -> CosineStructure:
    """Pairwise cosine similarities among rows or columns of m.

    Zero vectors get similarity 0 by convention (flagged in
    `zero_vectors`); the diagonal is 1 for nonzero vectors.
    """
    m = as_matrix(m, "m")
    if axis == "rows":
        vectors = m
    elif axis == "cols":
        vectors = m.T
    else:
        raise DomainError(f"axis must be 'rows' or 'cols', got {axis!r}")
    n = vectors.shape[0]
    if n < 2:
        raise DomainError("cosine_structure needs at least 2 vectors")

    norms = np.linalg.norm(vectors, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = vectors / safe[:, None]
    heatmap = unit @ unit.T
    heatmap[zero, :] = 0.0
    heatmap[:, zero] = 0.0
    np.fill_diagonal(heatmap, np.where(zero, 0.0, 1.0))
    offdiag = np.abs(heatmap[~np.eye(n, dtype=bool)])
    return CosineStructure(
        heatmap=heatmap,
        mean_offdiag_abs=float(offdiag.mean()),
        zero_vectors=tuple(int(i) for i in np.flatnonzero(zero)),
    )


@dataclass
class NormStats:
    """l2 column-norm statistics over selected vs non-selected columns.

    For a single layer `avg_ratio == max_ratio`; aggregation across layers
    averages and maxes the per-layer ratios. Ratios are inf when the
    non-selected mean vanishes and nan when both means do.
    """

    mean_selected: float
    mean_nonselected: float
    avg_ratio: float
    max_ratio: float


def column_norm_stats(a_trained, selected_cols) -> NormStats:
    a = as_matrix(a_trained, "a_trained")
    k = a.shape[1]
    selected = [int(c) for c in selected_cols]
    if not selected:
        raise DomainError("selected_cols must be nonempty")
    if len(set(selected)) != len(selected):
        raise DomainError("selected_cols must be distinct")
    if any(not 0 <= c < k for c in selected):
        raise DomainError("selected_cols out of range")
    if len(selected) >= k:
        raise DomainError("complement of selected_cols is empty")

    norms = np.linalg.norm(a, axis=0)
    sel_mask = np.zeros(k, dtype=bool)
    sel_mask[selected] = True
    mean_sel = float(norms[sel_mask].mean())
    mean_non = float(norms[~sel_mask].mean())
    if mean_non > 0.0:
        ratio = mean_sel / mean_non
    else:
        ratio = math.inf if mean_sel > 0.0 else math.nan
    return NormStats(
        mean_selected=mean_sel,
        mean_nonselected=mean_non,
        avg_ratio=ratio,
        max_ratio=ratio,
    )


def aggregate_norm_stats(stats: list[NormStats]) -> NormStats | None:
    if not stats:
        return None
    ratios = [s.avg_ratio for s in stats]
    finite = [r for r in ratios if math.isfinite(r)]
    return NormStats(
        mean_selected=float(np.mean([s.mean_selected for s in stats])),
        mean_nonselected=float(np.mean([s.mean_nonselected for s in stats])),
        avg_ratio=float(np.mean(finite)) if finite else math.nan,
        max_ratio=max(ratios) if ratios else math.nan,
    )


def feature_delta_pca(f_before, f_after, n_components: int) -> np.ndarray:
    """Scores of the PCA of (f_after - f_before); rows are tokens."""
    f_before = as_matrix(f_before, "f_before")
    f_after = as_matrix(f_after, "f_after")
    if f_before.shape != f_after.shape:
        raise DomainError(
            f"feature shapes differ: {f_before.shape} vs {f_after.shape}"
        )
    return pca_project(f_after - f_before, n_components).scores


@dataclass
class LayerDiagnostics:
    layer_id: str
    effective_rank: float | None
    rank_efficiency: float | None
    phi: float | None
    mean_offdiag_cos_a: float | None
    mean_offdiag_cos_b: float | None
    norm_stats: NormStats | None


@dataclass
class DiagnosticsReport:
    layers: list[LayerDiagnostics]
    mean_effective_rank: float | None
    mean_rank_efficiency: float | None
    mean_phi: float | None
    mean_offdiag_cos_a: float | None
    mean_offdiag_cos_b: float | None
    norm_stats: NormStats | None


def layer_diagnostics(layer_id: str, main: LoraAdapter,
                      sub: LoraAdapter | None = None) -> LayerDiagnostics:
    """Per-layer metrics from the adapter factors.

    Effective rank is measured on the combined learned update
    (b_main @ a_main plus the sub contribution) against the summed target
    rank; metrics that need structure a layer lacks (phi without a sub
    adapter, norm stats without recorded pivot columns) come back None.
    """
    delta = main.delta()
    target = main.rank
    if sub is not None:
        delta = delta + sub.delta()
        target += sub.rank

    erank = effective_rank(delta) if delta.any() else None
    eff = rank_efficiency(erank, target) if erank is not None else None

    phi = None
    if sub is not None and main.a.any() and sub.a.any():
        phi = grassmann_similarity(main.a, sub.a)

    cos_a = cosine_structure(main.a, "rows").mean_offdiag_abs if main.rank >= 2 else None
    cos_b = cosine_structure(main.b, "cols").mean_offdiag_abs if main.rank >= 2 else None

    stats = None
    if main.selected_cols and len(main.selected_cols) < main.a.shape[1] and main.a.any():
        stats = column_norm_stats(main.a, main.selected_cols)

    return LayerDiagnostics(
        layer_id=layer_id,
        effective_rank=erank,
        rank_efficiency=eff,
        phi=phi,
        mean_offdiag_cos_a=cos_a,
        mean_offdiag_cos_b=cos_b,
        norm_stats=stats,
    )


def diagnose_layer(layer_id: str, layer: DualAdapterLinear) -> LayerDiagnostics:
    return layer_diagnostics(layer_id, layer.main, layer.sub)


def _mean_or_none(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(present)) if present else None


def build_report(layers: list[LayerDiagnostics]) -> DiagnosticsReport:
    """Merge per-layer records in layer-id order and attach aggregate means."""
    ordered = sorted(layers, key=lambda rec: rec.layer_id)
    return DiagnosticsReport(
        layers=ordered,
        mean_effective_rank=_mean_or_none([r.effective_rank for r in ordered]),
        mean_rank_efficiency=_mean_or_none([r.rank_efficiency for r in ordered]),
        mean_phi=_mean_or_none([r.phi for r in ordered]),
        mean_offdiag_cos_a=_mean_or_none([r.mean_offdiag_cos_a for r in ordered]),
        mean_offdiag_cos_b=_mean_or_none([r.mean_offdiag_cos_b for r in ordered]),
        norm_stats=aggregate_norm_stats([r.norm_stats for r in ordered if r.norm_stats]),
    )
