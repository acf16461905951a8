"""Desk-scale training harness.

Synthetic domain-shift task (teacher MLP with rotated-input, perturbed-output
target distribution), manual backpropagation through dual-adapter layers,
AdamW with per-adapter learning-rate multipliers and a polynomial schedule,
a finite-difference gradient checker, and an experiment runner that records
diagnostics snapshots. Everything is a deterministic function of (config,
seed); only the adapter factors ever receive gradients.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields

import numpy as np

from .adapter import DualAdapterLinear, InitStrategy, build_dual_layer, forward
from .diagnostics import DiagnosticsReport, build_report, diagnose_layer
from .errors import ConfigError, DivergenceError, DomainError
from .linalg import as_matrix
from .rng import child_seed, stream

# Rotation angle (radians) and output-perturbation magnitude per unit of
# shift strength; chosen so the unadapted source-fit model sees at least a
# 2x loss gap on the target distribution at shift_strength = 1.
THETA_PER_SHIFT = 0.35
PERT_PER_SHIFT = 0.35

# Full-batch gradients below this dataset size; above it, minibatches of
# config.batch_size are drawn from the seeded stream.
FULL_BATCH_LIMIT = 1024

_PRETRAIN_STEPS = 300
_PRETRAIN_LR = 5e-3


@dataclass
class ToyTask:
    """Teacher MLP plus the parameters that generate both data regimes.

    The seed fully determines the teacher, the samples, and the output
    perturbation map; `shift_strength` scales both the input rotation and
    the perturbation, so zero shift makes source and target identical.
    """

    teacher_weights: list[np.ndarray]
    input_mean: float
    input_scale: float
    theta: float
    pert_scale: float
    pert_map: np.ndarray
    n_source: int
    n_target: int
    seed: int

    @property
    def dim(self) -> int:
        return self.teacher_weights[0].shape[1]

    def teacher_forward(self, x: np.ndarray) -> np.ndarray:
        w1, w2 = self.teacher_weights
        return w2 @ np.tanh(w1 @ x)

    def _base_inputs(self, n: int) -> np.ndarray:
        rng = stream(self.seed, "inputs")
        return self.input_mean + self.input_scale * rng.normal(size=(self.dim, n))

    def source_data(self) -> tuple[np.ndarray, np.ndarray]:
        x = self._base_inputs(self.n_source)
        return x, self.teacher_forward(x)

    def target_data(self) -> tuple[np.ndarray, np.ndarray]:
        base = self._base_inputs(self.n_target)
        x = rotate_pairs(base, self.theta)
        y = self.teacher_forward(base) + self.pert_scale * (self.pert_map @ base)
        return x, y


def rotate_pairs(x: np.ndarray, theta: float) -> np.ndarray:
    """Rotate consecutive coordinate pairs of the columns of x by theta."""
    c, s = math.cos(theta), math.sin(theta)
    y = x.copy()
    even = x[0::2]
    odd = x[1::2]
    limit = min(even.shape[0], odd.shape[0])
    y[0 : 2 * limit : 2] = c * even[:limit] - s * odd[:limit]
    y[1 : 2 * limit : 2] = s * even[:limit] + c * odd[:limit]
    return y


def gen_toy_task(seed: int, shift_strength: float, dim: int = 64,
                 n_source: int = 256, n_target: int = 256) -> ToyTask:
    if shift_strength < 0:
        raise DomainError("shift_strength must be nonnegative")
    rng = stream(seed, "teacher")
    w1 = rng.normal(scale=1.0 / math.sqrt(dim), size=(dim, dim))
    w2 = rng.normal(scale=1.0 / math.sqrt(dim), size=(dim, dim))
    pert_map = stream(seed, "pert").normal(scale=1.0 / math.sqrt(dim), size=(dim, dim))
    return ToyTask(
        teacher_weights=[w1, w2],
        input_mean=0.0,
        input_scale=1.0,
        theta=THETA_PER_SHIFT * shift_strength,
        pert_scale=PERT_PER_SHIFT * shift_strength,
        pert_map=pert_map,
        n_source=n_source,
        n_target=n_target,
        seed=seed,
    )


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries, with its gradient wrt pred."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


@dataclass
class LayerGrads:
    a_main: np.ndarray
    b_main: np.ndarray
    a_sub: np.ndarray | None
    b_sub: np.ndarray | None
    x: np.ndarray


def backward(layer: DualAdapterLinear, x, upstream) -> LayerGrads:
    """Gradients of the layer's forward pass; the residual gets none.

    grad_b = upstream @ (a @ x)^T, grad_a = b^T @ upstream @ x^T, and
    grad_x flows through the merged weight.
    """
    x = as_matrix(x, "x")
    upstream = as_matrix(upstream, "upstream")
    if x.shape[0] != layer.d_in:
        raise DomainError(f"x has {x.shape[0]} rows, layer expects {layer.d_in}")
    if upstream.shape != (layer.d_out, x.shape[1]):
        raise DomainError(
            f"upstream shape {upstream.shape} does not match ({layer.d_out}, {x.shape[1]})"
        )
    main = layer.main
    g_b_main = upstream @ (main.a @ x).T
    g_a_main = (main.b.T @ upstream) @ x.T
    grad_x = layer.w_residual.T @ upstream + main.a.T @ (main.b.T @ upstream)
    g_a_sub = g_b_sub = None
    if layer.sub is not None:
        sub = layer.sub
        g_b_sub = upstream @ (sub.a @ x).T
        g_a_sub = (sub.b.T @ upstream) @ x.T
        grad_x = grad_x + sub.a.T @ (sub.b.T @ upstream)
    return LayerGrads(a_main=g_a_main, b_main=g_b_main, a_sub=g_a_sub,
                      b_sub=g_b_sub, x=grad_x)


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamWState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState,
               lr_effective: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> np.ndarray:
    """One decoupled-weight-decay Adam update; returns the new parameter.

    Decay is applied multiplicatively before the moment update, so a zero
    gradient still shrinks the weight by (1 - lr * decay).
    """
    state.t += 1
    p = param * (1.0 - lr_effective * weight_decay)
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return p - lr_effective * m_hat / (np.sqrt(v_hat) + eps)


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - step/total_steps)^power."""
    if total_steps < 1:
        raise DomainError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise DomainError(f"step must be in [0, {total_steps}], got {step}")
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass
class TrainConfig:
    iterations: int
    base_lr: float = 1e-4
    main_lr_mult: float = 1.0
    sub_lr_mult: float = 0.5
    weight_decay: float = 0.05
    batch_size: int = 4
    poly_power: float = 0.9
    r_main: int = 32
    r_sub: int = 4
    strategy: InitStrategy = InitStrategy.RRQR_DUAL
    seed: int = 0
    shift_strength: float = 1.0
    snapshot_interval: int = 0

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = InitStrategy(self.strategy)
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        for name in ("base_lr", "main_lr_mult", "sub_lr_mult", "weight_decay",
                     "shift_strength"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.r_main < 0 or self.r_sub < 0:
            raise ConfigError("ranks must be nonnegative")
        if self.snapshot_interval < 0:
            raise ConfigError("snapshot_interval must be nonnegative")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        allowed = {f.name for f in fields(cls)}
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"unknown config key: {key!r}")
        if "iterations" not in raw:
            raise ConfigError("missing config key: 'iterations'")
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, InitStrategy) else value
        return out


@dataclass
class TrainReport:
    config: dict
    loss_trajectory: list[float]
    initial_source_loss: float
    initial_target_loss: float
    final_source_loss: float
    final_target_loss: float
    snapshots: list[tuple[int, DiagnosticsReport]]
    wall_clock_s: float


def pretrain_dense(task: ToyTask, steps: int = _PRETRAIN_STEPS,
                   lr: float = _PRETRAIN_LR) -> list[np.ndarray]:
    """Fit a fresh student MLP to the source data; its weights become W0.

    The short dense fit gives the weights the column structure the pivoted
    factorization feeds on, and its residual error is the source-loss
    floor of the unadapted model.
    """
    x, y = task.source_data()
    dim = task.dim
    rng = stream(task.seed, "student")
    bound = math.sqrt(6.0 / dim)
    w1 = rng.uniform(-bound, bound, size=(dim, dim))
    w2 = rng.uniform(-bound, bound, size=(dim, dim))
    states = [AdamWState.like(w1), AdamWState.like(w2)]
    for step in range(steps):
        h = w1 @ x
        act = np.tanh(h)
        pred = w2 @ act
        _, g_pred = mse_loss(pred, y)
        g_w2 = g_pred @ act.T
        g_act = w2.T @ g_pred
        g_h = g_act * (1.0 - act * act)
        g_w1 = g_h @ x.T
        w1 = adamw_step(w1, g_w1, states[0], lr, 0.0)
        w2 = adamw_step(w2, g_w2, states[1], lr, 0.0)
    return [w1, w2]


def _model_forward(layers: list[DualAdapterLinear], x: np.ndarray):
    h = forward(layers[0], x)
    act = np.tanh(h)
    pred = forward(layers[1], act)
    return pred, act


def evaluate_loss(layers: list[DualAdapterLinear], x: np.ndarray, y: np.ndarray) -> float:
    pred, _ = _model_forward(layers, x)
    return mse_loss(pred, y)[0]


@dataclass
class ExperimentResult:
    report: TrainReport
    layers: list[DualAdapterLinear]
    pretrained: list[np.ndarray]


def run_experiment_detailed(config: TrainConfig, task: ToyTask) -> ExperimentResult:
    """Pretrain dense weights, wrap them in dual-adapter layers, and adapt
    to the target distribution, recording losses and diagnostics.
    """
    start = time.perf_counter()
    w0s = pretrain_dense(task)
    m = min(min(w.shape) for w in w0s)
    if config.r_main + config.r_sub > m:
        raise DomainError(
            f"r_main + r_sub = {config.r_main} + {config.r_sub} exceeds min(d, k) = {m}"
        )

    layers = [
        build_dual_layer(
            w0,
            config.r_main,
            config.r_sub,
            config.strategy,
            seed=child_seed(config.seed, "init", idx),
            main_lr_mult=config.main_lr_mult,
            sub_lr_mult=config.sub_lr_mult,
        )
        for idx, w0 in enumerate(w0s)
    ]

    x_src, y_src = task.source_data()
    x_tgt, y_tgt = task.target_data()
    initial_source = evaluate_loss(layers, x_src, y_src)
    initial_target = evaluate_loss(layers, x_tgt, y_tgt)

    slots: list[tuple[int, str, str]] = []
    states: list[AdamWState] = []
    for i, layer in enumerate(layers):
        for slot, adapter_obj in layer.adapters():
            for name in ("b", "a"):
                slots.append((i, slot, name))
                states.append(AdamWState.like(getattr(adapter_obj, name)))

    n = x_tgt.shape[1]
    use_minibatch = n > FULL_BATCH_LIMIT
    batch_rng = stream(config.seed, "batches")

    losses: list[float] = []
    snapshots: list[tuple[int, DiagnosticsReport]] = []

    def snapshot(step: int) -> None:
        snapshots.append(
            (step, build_report([diagnose_layer(f"layer{i}", lay)
                                 for i, lay in enumerate(layers)]))
        )

    for step in range(config.iterations):
        if use_minibatch:
            idx = batch_rng.integers(0, n, size=config.batch_size)
            xb, yb = x_tgt[:, idx], y_tgt[:, idx]
        else:
            xb, yb = x_tgt, y_tgt

        # Shapes were validated by the pre-loop evaluation, so a DomainError
        # here means exploding parameters produced non-finite activations.
        try:
            pred, act = _model_forward(layers, xb)
            loss, g_pred = mse_loss(pred, yb)
        except DomainError as exc:
            raise DivergenceError(step) from exc
        if not math.isfinite(loss):
            raise DivergenceError(step)
        losses.append(loss)

        g2 = backward(layers[1], act, g_pred)
        g_h = g2.x * (1.0 - act * act)
        g1 = backward(layers[0], xb, g_h)
        by_layer = [g1, g2]

        lr_t = poly_lr(step, config.iterations, config.base_lr, config.poly_power)
        for (layer_idx, slot, name), state in zip(slots, states):
            layer = layers[layer_idx]
            adapter_obj = layer.main if slot == "main" else layer.sub
            grad = getattr(by_layer[layer_idx], f"{name}_{slot}")
            lr_eff = lr_t * adapter_obj.lr_multiplier
            setattr(adapter_obj, name,
                    adamw_step(getattr(adapter_obj, name), grad, state,
                               lr_eff, config.weight_decay))

        if config.snapshot_interval and (step + 1) % config.snapshot_interval == 0:
            snapshot(step + 1)

    if not snapshots or snapshots[-1][0] != config.iterations:
        snapshot(config.iterations)

    report = TrainReport(
        config=config.to_dict(),
        loss_trajectory=losses,
        initial_source_loss=initial_source,
        initial_target_loss=initial_target,
        final_source_loss=evaluate_loss(layers, x_src, y_src),
        final_target_loss=evaluate_loss(layers, x_tgt, y_tgt),
        snapshots=snapshots,
        wall_clock_s=time.perf_counter() - start,
    )
    return ExperimentResult(report=report, layers=layers, pretrained=w0s)


def run_experiment(config: TrainConfig, task: ToyTask) -> TrainReport:
    return run_experiment_detailed(config, task).report


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    n_checked: int
    passed: bool


def finite_diff_check(layer: DualAdapterLinear, x, loss_fn, h: float = 1e-5,
                      tol: float = 1e-6, max_entries: int = 4096,
                      seed: int = 0) -> FiniteDiffReport:
    """Central differences on every trainable entry vs analytic gradients.

    `loss_fn(pred)` must return (value, grad_wrt_pred); the gradient seeds
    the analytic path while the value alone drives the difference quotient,
    so a corrupted loss gradient is caught. Relative errors are scaled by
    the largest analytic gradient magnitude. Above `max_entries` total
    entries, a seeded subsample is checked instead.
    """
    if h <= 0:
        raise DomainError("h must be positive")
    x = as_matrix(x, "x")
    _, g_out = loss_fn(forward(layer, x))
    grads = backward(layer, x, as_matrix(g_out, "loss gradient"))

    pieces: list[tuple[np.ndarray, np.ndarray]] = [
        (layer.main.a, grads.a_main), (layer.main.b, grads.b_main)]
    if layer.sub is not None:
        pieces += [(layer.sub.a, grads.a_sub), (layer.sub.b, grads.b_sub)]

    gmax = max(float(np.abs(g).max()) for _, g in pieces)
    gmax = max(gmax, 1e-12)

    total = sum(p.size for p, _ in pieces)
    rng = stream(seed, "fd")
    max_rel = 0.0
    checked = 0
    for param, analytic in pieces:
        if total > max_entries:
            count = max(1, int(round(max_entries * param.size / total)))
            flat_indices = rng.choice(param.size, size=min(count, param.size),
                                      replace=False)
        else:
            flat_indices = np.arange(param.size)
        for flat in flat_indices:
            idx = np.unravel_index(flat, param.shape)
            orig = param[idx]
            param[idx] = orig + h
            up = loss_fn(forward(layer, x))[0]
            param[idx] = orig - h
            down = loss_fn(forward(layer, x))[0]
            param[idx] = orig
            fd = (up - down) / (2.0 * h)
            max_rel = max(max_rel, abs(fd - analytic[idx]) / gmax)
            checked += 1
    return FiniteDiffReport(max_rel_error=max_rel, n_checked=checked,
                            passed=max_rel <= tol)
