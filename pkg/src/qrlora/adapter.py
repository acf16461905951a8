"""Dual low-rank adapter layers on frozen dense weights.

A layer holds a frozen residual weight plus a main adapter and an optional
sub adapter; the residual is built by subtracting the adapters' initial
products from the original weight, so a freshly built layer reproduces the
original output exactly. Adapter contributions enter the forward pass with
coefficient 1 (no alpha/r scaling).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError
from .linalg import RrqrFactorization, as_matrix, rrqr, svd
from .rng import child_seed, stream

DEFAULT_MAIN_LR_MULT = 1.0
DEFAULT_SUB_LR_MULT = 0.5


class InitStrategy(Enum):
    """How the adapters of a layer are initialized."""

    RRQR_DUAL = "rrqr-dual"
    RRQR_MAIN_ONLY = "rrqr-main-only"
    RRQR_SUB_ONLY = "rrqr-sub-only"
    SVD_MINOR = "svd-minor"
    SVD_MAJOR = "svd-major"
    KAIMING_UNIFORM = "kaiming-uniform"


#: Strategies that carry a single adapter (held in the main slot).
SINGLE_ADAPTER_STRATEGIES = frozenset(
    {InitStrategy.RRQR_MAIN_ONLY, InitStrategy.RRQR_SUB_ONLY, InitStrategy.SVD_MINOR, InitStrategy.SVD_MAJOR}
)


@dataclass
class LoraAdapter:
    """Low-rank factor pair: delta = b @ a with b (d x r), a (r x k).

    `selected_cols` records, for pivoted-QR initializations, the original
    column indices targeted by the one-hot rows of `a`; empty for dense
    baselines.
    """

    b: np.ndarray
    a: np.ndarray
    rank: int
    lr_multiplier: float = 1.0
    selected_cols: tuple[int, ...] = ()

    def __post_init__(self):
        self.b = as_matrix(self.b, "b")
        self.a = as_matrix(self.a, "a")
        d, rb = self.b.shape
        ra, k = self.a.shape
        if rb != self.rank or ra != self.rank:
            raise DomainError(
                f"rank {self.rank} does not match factor shapes {self.b.shape} x {self.a.shape}"
            )
        if self.rank > min(d, k):
            raise DomainError(f"rank {self.rank} exceeds min(d, k) = {min(d, k)}")
        if self.lr_multiplier < 0:
            raise DomainError("lr_multiplier must be nonnegative")
        self.selected_cols = tuple(int(c) for c in self.selected_cols)
        if len(set(self.selected_cols)) != len(self.selected_cols):
            raise DomainError("selected_cols must be distinct")
        if any(not 0 <= c < k for c in self.selected_cols):
            raise DomainError("selected_cols out of range")

    def delta(self) -> np.ndarray:
        return self.b @ self.a


@dataclass
class DualAdapterLinear:
    """Frozen residual weight plus main (and optional sub) adapter."""

    w_residual: np.ndarray
    main: LoraAdapter
    sub: LoraAdapter | None
    d_out: int
    d_in: int
    w_original: np.ndarray

    def __post_init__(self):
        self.w_residual = as_matrix(self.w_residual, "w_residual").copy()
        self.w_original = as_matrix(self.w_original, "w_original").copy()
        self.w_residual.flags.writeable = False
        self.w_original.flags.writeable = False
        if self.w_residual.shape != (self.d_out, self.d_in):
            raise DomainError("w_residual shape does not match layer dims")
        if self.sub is not None:
            overlap = set(self.main.selected_cols) & set(self.sub.selected_cols)
            if overlap:
                raise DomainError(f"main/sub selected columns overlap: {sorted(overlap)}")
        recon = self.w_residual + self.main.delta()
        if self.sub is not None:
            recon = recon + self.sub.delta()
        if np.abs(recon - self.w_original).max() > 1e-12 * max(1.0, np.abs(self.w_original).max()):
            raise DomainError("residual + adapter deltas do not reconstruct the original weight")

    def forward(self, x) -> np.ndarray:
        return forward(self, x)

    def merge(self) -> np.ndarray:
        return merge(self)

    def adapters(self) -> list[tuple[str, LoraAdapter]]:
        out = [("main", self.main)]
        if self.sub is not None:
            out.append(("sub", self.sub))
        return out


def _check_factorization(w0: np.ndarray, fac: RrqrFactorization) -> int:
    d, k = w0.shape
    m = min(d, k)
    if fac.q.shape != (d, m) or fac.r.shape != (m, k) or fac.perm.shape != (k,):
        raise DomainError(
            f"factorization shapes {fac.q.shape}/{fac.r.shape}/{fac.perm.shape} "
            f"do not match weight shape {w0.shape}"
        )
    return m


def _one_hot_rows(selected: np.ndarray, k: int) -> np.ndarray:
    a = np.zeros((selected.size, k))
    a[np.arange(selected.size), selected] = 1.0
    return a


def init_main(w0, fac: RrqrFactorization, r_main: int,
              lr_multiplier: float = DEFAULT_MAIN_LR_MULT) -> LoraAdapter:
    """Main adapter from the last (minor) r_main pivoted directions.

    b takes the trailing columns of q; row i of a is one-hot at
    perm[m - r_main + i], so the initial delta lands exactly on those
    original columns.
    """
    w0 = as_matrix(w0, "w0")
    m = _check_factorization(w0, fac)
    if not 1 <= r_main <= m:
        raise DomainError(f"r_main must be in [1, {m}], got {r_main}")
    sel = np.asarray(fac.perm[m - r_main : m])
    return LoraAdapter(
        b=fac.q[:, m - r_main :].copy(),
        a=_one_hot_rows(sel, w0.shape[1]),
        rank=r_main,
        lr_multiplier=lr_multiplier,
        selected_cols=tuple(int(c) for c in sel),
    )


def init_sub(w0, fac: RrqrFactorization, r_sub: int,
             lr_multiplier: float = DEFAULT_SUB_LR_MULT) -> LoraAdapter:
    """Sub adapter from the first (major) r_sub pivoted directions."""
    w0 = as_matrix(w0, "w0")
    m = _check_factorization(w0, fac)
    if not 1 <= r_sub <= m:
        raise DomainError(f"r_sub must be in [1, {m}], got {r_sub}")
    sel = np.asarray(fac.perm[:r_sub])
    return LoraAdapter(
        b=fac.q[:, :r_sub].copy(),
        a=_one_hot_rows(sel, w0.shape[1]),
        rank=r_sub,
        lr_multiplier=lr_multiplier,
        selected_cols=tuple(int(c) for c in sel),
    )


def init_baseline(d: int, k: int, r: int, strategy: InitStrategy, seed: int, w0,
                  lr_multiplier: float = DEFAULT_MAIN_LR_MULT) -> LoraAdapter:
    """Dense baseline adapters: Kaiming-uniform A with zero B, or SVD factors.

    The SVD variants split each singular value as sqrt(sigma) onto both
    factors; `SVD_MINOR` takes the r smallest triplets, `SVD_MAJOR` the r
    largest.
    """
    w0 = as_matrix(w0, "w0")
    if w0.shape != (d, k):
        raise DomainError(f"w0 shape {w0.shape} does not match ({d}, {k})")
    m = min(d, k)
    if not 1 <= r <= m:
        raise DomainError(f"r must be in [1, {m}], got {r}")

    if strategy is InitStrategy.KAIMING_UNIFORM:
        bound = np.sqrt(6.0 / k)
        a = stream(seed, "kaiming-a").uniform(-bound, bound, size=(r, k))
        return LoraAdapter(b=np.zeros((d, r)), a=a, rank=r, lr_multiplier=lr_multiplier)

    if strategy in (InitStrategy.SVD_MINOR, InitStrategy.SVD_MAJOR):
        fac = svd(w0)
        idx = slice(m - r, m) if strategy is InitStrategy.SVD_MINOR else slice(0, r)
        root = np.sqrt(fac.sigma[idx])
        b = fac.u[:, idx] * root
        a = root[:, None] * fac.v[:, idx].T
        return LoraAdapter(b=b, a=a, rank=r, lr_multiplier=lr_multiplier)

    raise DomainError(f"init_baseline does not support strategy {strategy.value}")


def build_dual_layer(w0, r_main: int, r_sub: int, strategy: InitStrategy, seed: int,
                     main_lr_mult: float = DEFAULT_MAIN_LR_MULT,
                     sub_lr_mult: float = DEFAULT_SUB_LR_MULT) -> DualAdapterLinear:
    """Assemble a frozen-residual layer under the given initialization.

    Pivoted-QR strategies require r_main + r_sub <= min(d, k) so the two
    adapters target disjoint original columns. Single-adapter strategies
    take their rank from the slot they fill and require the other rank to
    be zero.
    """
    w0 = as_matrix(w0, "w0")
    d, k = w0.shape
    m = min(d, k)
    if r_main < 0 or r_sub < 0:
        raise DomainError("ranks must be nonnegative")

    main: LoraAdapter
    sub: LoraAdapter | None = None

    if strategy is InitStrategy.RRQR_DUAL:
        if r_main + r_sub > m:
            raise DomainError(
                f"r_main + r_sub = {r_main} + {r_sub} exceeds min(d, k) = {m}"
            )
        fac = rrqr(w0)
        main = init_main(w0, fac, r_main, lr_multiplier=main_lr_mult)
        if r_sub > 0:
            sub = init_sub(w0, fac, r_sub, lr_multiplier=sub_lr_mult)
    elif strategy is InitStrategy.RRQR_MAIN_ONLY:
        if r_sub != 0:
            raise DomainError("rrqr-main-only takes r_sub = 0")
        main = init_main(w0, rrqr(w0), r_main, lr_multiplier=main_lr_mult)
    elif strategy is InitStrategy.RRQR_SUB_ONLY:
        if r_main != 0:
            raise DomainError("rrqr-sub-only takes r_main = 0")
        main = init_sub(w0, rrqr(w0), r_sub, lr_multiplier=sub_lr_mult)
    elif strategy in (InitStrategy.SVD_MINOR, InitStrategy.SVD_MAJOR):
        if r_sub != 0:
            raise DomainError(f"{strategy.value} takes r_sub = 0")
        main = init_baseline(d, k, r_main, strategy, seed, w0, lr_multiplier=main_lr_mult)
    elif strategy is InitStrategy.KAIMING_UNIFORM:
        main = init_baseline(d, k, r_main, strategy, seed, w0, lr_multiplier=main_lr_mult)
        if r_sub > 0:
            sub = init_baseline(
                d, k, r_sub, strategy, child_seed(seed, "sub"), w0,
                lr_multiplier=sub_lr_mult,
            )
    else:  # pragma: no cover - enum is closed
        raise DomainError(f"unknown strategy {strategy}")

    w_res = w0 - main.delta()
    if sub is not None:
        w_res = w_res - sub.delta()
    return DualAdapterLinear(
        w_residual=w_res, main=main, sub=sub, d_out=d, d_in=k, w_original=w0
    )


def forward(layer: DualAdapterLinear, x) -> np.ndarray:
    """w_residual @ x plus each adapter's b @ (a @ x); x is d_in x n."""
    x = as_matrix(x, "x")
    if x.shape[0] != layer.d_in:
        raise DomainError(f"x has {x.shape[0]} rows, layer expects {layer.d_in}")
    y = layer.w_residual @ x + layer.main.b @ (layer.main.a @ x)
    if layer.sub is not None:
        y = y + layer.sub.b @ (layer.sub.a @ x)
    return y


def merge(layer: DualAdapterLinear) -> np.ndarray:
    """Collapse residual and adapter products into one dense matrix."""
    w = layer.w_residual + layer.main.delta()
    if layer.sub is not None:
        w = w + layer.sub.delta()
    return w


def trainable_parameter_count(layer: DualAdapterLinear) -> int:
    return sum(ad.b.size + ad.a.size for _, ad in layer.adapters())
