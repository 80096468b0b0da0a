"""Analytic adapter gradients, finite-difference checks and small training loops.

The trainable change applied to a frozen weight is ``s * delta(theta)``. Tasks
see only that effective change and return ``dL/d(change)``; the loop then
multiplies by ``s`` exactly once before back-propagating into the adapter, so
the adapter gradient code never deals with the scale.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adapters import (FrozenLayer, LoraAdapter, TuckerAdapter, adapter_delta, init_lora,
                       conv_weight_to_matrix)
from .layers import im2col, weight_to_gemm
from .tensor import as_tensor, multi_mode_product, unfold

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    delta_frob: float
    amp_factor: float


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or blew up past the divergence guard."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


# -- tasks -----------------------------------------------------------------

@dataclass
class RecoveryTask:
    """Fit the effective change directly: ``0.5 * ||change - target||_F^2``."""

    layer: FrozenLayer
    target: np.ndarray

    def __post_init__(self):
        self.target = as_tensor(self.target, "target")
        if self.target.shape != self.layer.shape:
            raise ValueError(f"target {self.target.shape} does not match layer {self.layer.shape}")

    def value_and_grad(self, change):
        r = change - self.target
        return 0.5 * float(np.sum(r * r)), r

    def relative_error(self, change) -> float:
        return float(np.linalg.norm(change - self.target) / np.linalg.norm(self.target))


@dataclass
class LayerFitTask:
    """Match frozen-plus-change layer outputs to targets over a fixed batch.

    For a linear layer ``inputs`` is ``(d2, batch)`` and ``targets`` is
    ``(d1, batch)``. For a conv layer ``inputs`` is ``(batch, d_in, H, W)`` and
    ``targets`` is ``(batch, d_out, H', W')``.
    """

    layer: FrozenLayer
    inputs: np.ndarray
    targets: np.ndarray
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs, "inputs")
        self.targets = as_tensor(self.targets, "targets")
        self._cols = _patches(self.layer, self.inputs, self.stride, self.padding)
        if _outputs(self.layer.weight, self.inputs, self._cols).shape != self.targets.shape:
            raise ValueError("targets do not match the layer output shape")

    @classmethod
    def from_target_change(cls, layer: FrozenLayer, target_change, inputs,
                           stride: int = 1, padding: str = "valid"):
        """Targets produced by the weight ``W0 + target_change``."""
        inputs = as_tensor(inputs, "inputs")
        cols = _patches(layer, inputs, stride, padding)
        targets = _outputs(layer.weight + as_tensor(target_change, "target change"), inputs, cols)
        return cls(layer, inputs, targets, stride, padding)

    def value_and_grad(self, change):
        weight = self.layer.weight + change
        r = _outputs(weight, self.inputs, self._cols) - self.targets
        loss = 0.5 * float(np.sum(r * r))
        if weight.ndim == 2:
            return loss, r @ self.inputs.T
        d_in, d_out, k, _ = weight.shape
        g = np.zeros((d_out, d_in * k * k))
        for ri, (cols, _) in zip(r, self._cols):
            g += ri.reshape(d_out, -1) @ cols.T
        return loss, np.ascontiguousarray(g.reshape(d_out, d_in, k, k).transpose(1, 0, 2, 3))


def _patches(layer, inputs, stride, padding):
    if layer.kind == "linear":
        if inputs.ndim != 2 or inputs.shape[0] != layer.shape[1]:
            raise ValueError(f"linear inputs must be ({layer.shape[1]}, batch), got {inputs.shape}")
        return None
    if inputs.ndim != 4 or inputs.shape[1] != layer.shape[0]:
        raise ValueError(f"conv inputs must be (batch, {layer.shape[0]}, H, W), got {inputs.shape}")
    return [im2col(x, layer.kernel_size, stride, padding) for x in inputs]


def _outputs(weight, inputs, cols):
    if weight.ndim == 2:
        return weight @ inputs
    wg = weight_to_gemm(weight)
    return np.stack([(wg @ c).reshape(weight.shape[1], *hw) for c, hw in cols])


# -- gradients -------------------------------------------------------------

def grad_tucker(adapter: TuckerAdapter, upstream):
    """Gradients of a loss w.r.t. the core and every factor, given ``dL/d delta``.

    Returns ``(core_grad, factor_grads)`` where ``core_grad`` is ``upstream``
    contracted with every transposed factor and factor ``n``'s gradient is
    ``unfold(upstream, n) @ unfold(core x_{m != n} F_m, n).T``.
    """
    upstream = as_tensor(upstream, "upstream")
    if upstream.shape != adapter.shape:
        raise ValueError(f"upstream {upstream.shape} does not match adapter {adapter.shape}")
    core_grad = multi_mode_product(upstream, adapter.factors, transpose_factors=True)
    factor_grads = []
    for n in range(len(adapter.factors)):
        partial = multi_mode_product(adapter.core, adapter.factors, skip=n)
        factor_grads.append(unfold(upstream, n) @ unfold(partial, n).T)
    return core_grad, factor_grads


def grad_lora(adapter: LoraAdapter, layer: FrozenLayer, upstream):
    """``(dA, dB)`` for ``delta = B A^T``, mapping conv upstreams through the reshape first."""
    upstream = as_tensor(upstream, "upstream")
    if upstream.shape != layer.shape:
        raise ValueError(f"upstream {upstream.shape} does not match layer {layer.shape}")
    m = upstream if adapter.kind == "linear" else conv_weight_to_matrix(upstream)
    if m.shape != (adapter.b.shape[0], adapter.a.shape[0]):
        raise ValueError("LoRA adapter does not fit the upstream gradient")
    return m.T @ adapter.b, m @ adapter.a


def adapter_grads(adapter, layer: FrozenLayer, upstream) -> list:
    """Gradients aligned with ``adapter.parameters()``."""
    if isinstance(adapter, TuckerAdapter):
        core_grad, factor_grads = grad_tucker(adapter, upstream)
        return [core_grad, *factor_grads]
    return list(grad_lora(adapter, layer, upstream))


def loss_and_grads(task, adapter):
    delta = adapter_delta(adapter, task.layer)
    loss, g = task.value_and_grad(adapter.scale * delta)
    return loss, adapter_grads(adapter, task.layer, adapter.scale * g)


# -- finite differences ----------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_errors: list
    worst_param: int
    worst_index: tuple
    worst_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance


def finite_diff_check(loss_fn: Callable, params: Sequence[np.ndarray], h: float = 1e-5,
                      tolerance: float = 1e-6, atol: float = 1e-8) -> FiniteDiffReport:
    """Compare analytic gradients against central differences entry by entry.

    ``loss_fn()`` must return ``(loss, grads)`` evaluated at the current
    contents of ``params``, which are perturbed in place and restored. The
    relative error of an entry is ``|g - n| / max(|g|, |n|, atol)``.
    """
    if not 1e-7 <= h <= 1e-3:
        import warnings
        warnings.warn(f"step h={h:g} lies outside [1e-7, 1e-3]; expect inaccurate differences",
                      stacklevel=2)
    _, grads = loss_fn()
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    per_param, worst = [], (0, (), -1.0)
    for pi, (p, g) in enumerate(zip(params, grads)):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = loss_fn()[0]
            p[idx] = orig - h
            fm = loss_fn()[0]
            p[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), atol)
        rel = np.abs(g - numeric) / denom
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
        per_param.append(float(rel[idx]))
        if rel[idx] > worst[2]:
            worst = (pi, tuple(int(i) for i in idx), float(rel[idx]))
    return FiniteDiffReport(per_param, worst[0], worst[1], worst[2], tolerance)


def check_adapter_gradients(task, adapter, h: float = 1e-5, tolerance: float = 1e-6,
                            atol: float = 1e-8) -> FiniteDiffReport:
    adapter = copy.deepcopy(adapter)
    return finite_diff_check(lambda: loss_and_grads(task, adapter), adapter.parameters(),
                             h=h, tolerance=tolerance, atol=atol)


# -- optimizers ------------------------------------------------------------

@dataclass
class SGD:
    lr: float = 0.1
    lr_multipliers: Sequence[float] | None = None
    step_count: int = 0

    def step(self, params, grads):
        for i, (p, g) in enumerate(zip(params, grads)):
            lr = self.lr * (self.lr_multipliers[i] if self.lr_multipliers else 1.0)
            p -= lr * g
        self.step_count += 1


@dataclass
class Adam:
    """Adam with optional per-parameter multipliers on the learning rate and ``eps``."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_multipliers: Sequence[float] | None = None
    eps_multipliers: Sequence[float] | None = None
    step_count: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, (p, g) in enumerate(zip(params, grads)):
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr * (self.lr_multipliers[i] if self.lr_multipliers else 1.0)
            eps = self.eps * (self.eps_multipliers[i] if self.eps_multipliers else 1.0)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def make_optimizer(kind: str = "adam", lr: float | None = None, **kwargs):
    if kind == "adam":
        return Adam(lr=1e-2 if lr is None else lr, **kwargs)
    if kind == "sgd":
        return SGD(lr=0.1 if lr is None else lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- metrics and loop ------------------------------------------------------

def matrix_view(t) -> np.ndarray:
    """Linear weights as-is; conv weights through the fixed ``(k*d_in, k*d_out)`` reshape."""
    return t if t.ndim == 2 else conv_weight_to_matrix(t)


def adapter_rank(adapter) -> int:
    return adapter.ranks[0] if isinstance(adapter, TuckerAdapter) else adapter.rank


def record_for(step: int, loss: float, change, frozen, rank: int) -> TrainRecord:
    from .analysis import amplification_factor

    delta_m, frozen_m = matrix_view(change), matrix_view(frozen)
    rank = min(rank, *delta_m.shape)
    rep = amplification_factor(delta_m, frozen_m, rank)
    return TrainRecord(step=step, loss=float(loss), delta_frob=rep.delta_frob,
                       amp_factor=rep.factor)


def run_training(task, adapter, optimizer, steps: int, record_every: int = 100,
                 amp_rank: int | None = None):
    """Optimise a copy of ``adapter`` on ``task`` for ``steps`` updates.

    Records are taken at step 0, every ``record_every`` steps and at the final
    step; ``delta_frob`` and ``amp_factor`` refer to the effective change
    ``s * delta``. Returns ``(records, trained_adapter)``.

    Raises
    ------
    DivergenceError
        If the loss turns non-finite or exceeds ``1e6`` times its initial value.
    """
    if steps < 0 or record_every < 1:
        raise ValueError("steps must be >= 0 and record_every >= 1")
    adapter = copy.deepcopy(adapter)
    params = adapter.parameters()
    rank = adapter_rank(adapter) if amp_rank is None else amp_rank
    records = []
    initial = None
    for step in range(steps + 1):
        change = adapter.scale * adapter_delta(adapter, task.layer)
        loss, g = task.value_and_grad(change)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or (initial > 0 and loss > DIVERGENCE_FACTOR * initial):
            diag = TrainRecord(step=step, loss=float(loss),
                               delta_frob=float(np.linalg.norm(change)), amp_factor=float("nan"))
            raise DivergenceError(
                f"loss {loss:g} at step {step} (initial {initial:g}); lower the learning rate",
                records + [diag])
        if step % record_every == 0 or step == steps:
            records.append(record_for(step, loss, change, task.layer.weight, rank))
        if step == steps:
            break
        optimizer.step(params, adapter_grads(adapter, task.layer, adapter.scale * g))
        if not all(np.all(np.isfinite(p)) for p in params):
            diag = TrainRecord(step=step + 1, loss=float("nan"), delta_frob=float("nan"),
                               amp_factor=float("nan"))
            raise DivergenceError(f"non-finite parameters after step {step + 1}", records + [diag])
    return records, adapter


# -- synthetic problems ----------------------------------------------------

def seed_streams(seed: int, n: int) -> list:
    """``n`` independent generators derived from one integer seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def random_tucker_tensor(shape, ranks, rng) -> np.ndarray:
    core = rng.standard_normal(tuple(ranks))
    factors = [rng.standard_normal((i, j)) / np.sqrt(j) for i, j in zip(shape, ranks)]
    return multi_mode_product(core, factors)


def recovery_problem(shape, target_ranks, seed: int):
    """Seeded frozen layer plus a target change with exact Tucker ranks.

    Returns ``(task, adapter_seed)``; the adapter seed is drawn from a stream
    independent of the target so the initial factors never coincide with it.
    """
    shape = tuple(shape)
    frozen_rng, target_rng, adapter_rng = seed_streams(seed, 3)
    w0 = frozen_rng.standard_normal(shape) / np.sqrt(shape[1] if len(shape) == 2 else
                                                     shape[0] * shape[2] * shape[3])
    layer = FrozenLayer.from_weight(w0)
    target = random_tucker_tensor(shape, target_ranks, target_rng)
    return RecoveryTask(layer, target), int(adapter_rng.integers(2**31))


def final_relative_error(task: RecoveryTask, adapter) -> float:
    return task.relative_error(adapter.scale * adapter_delta(adapter, task.layer))


# -- gradient suite --------------------------------------------------------

GRADCHECK_KINDS = ("flora-linear", "flora-conv", "lora-linear", "lora-conv")
GRADCHECK_GRID = {
    "flora-linear": [((6, 5), (3, 2)), ((4, 6), (2, 3)), ((5, 5), (1, 1))],
    "flora-conv": [((4, 3, 3, 3), (2, 2, 2, 1)), ((3, 5, 3, 3), (3, 2, 1, 1)),
                   ((2, 2, 1, 1), (1, 2, 1, 1))],
    "lora-linear": [((6, 5), 2), ((4, 6), 3)],
    "lora-conv": [((4, 3, 3, 3), 2), ((2, 3, 1, 1), 1)],
}


def gradcheck_cases(only=None, seed: int = 0):
    """Yield ``(name, task, adapter)`` over the fixed grid of adapter, layer and task kinds.

    Every parameter is randomised (including the core and LoRA ``b``) so no
    gradient is trivially zero.
    """
    kinds = GRADCHECK_KINDS if only is None else tuple(only)
    for kind in kinds:
        if kind not in GRADCHECK_GRID:
            raise ValueError(f"unknown gradcheck kind {kind!r}; choose from {GRADCHECK_KINDS}")
        for ci, (shape, ranks) in enumerate(GRADCHECK_GRID[kind]):
            rng = np.random.default_rng([seed, GRADCHECK_KINDS.index(kind), ci])
            layer = FrozenLayer.from_weight(rng.standard_normal(shape))
            if kind.startswith("flora"):
                adapter = init_tucker_random(shape, ranks, 0.7, rng)
            else:
                adapter = init_lora(shape, ranks, 0.7, int(rng.integers(2**31)))
                adapter.b[...] = rng.standard_normal(adapter.b.shape)
            if len(shape) == 2:
                inputs = rng.standard_normal((shape[1], 4))
            else:
                inputs = rng.standard_normal((2, shape[0], shape[2] + 2, shape[2] + 3))
            tasks = {
                "recovery": RecoveryTask(layer, rng.standard_normal(shape)),
                "layerfit": LayerFitTask.from_target_change(
                    layer, rng.standard_normal(shape), inputs),
            }
            for tname, task in tasks.items():
                label = "x".join(map(str, shape))
                yield f"{kind}/{tname}/{label}", task, adapter


def init_tucker_random(shape, ranks, scale, rng) -> TuckerAdapter:
    """Tucker adapter with every entry Gaussian (unlike :func:`init_tucker`'s zero core)."""
    core = rng.standard_normal(tuple(ranks))
    factors = [rng.standard_normal((i, j)) / np.sqrt(j) for i, j in zip(shape, ranks)]
    return TuckerAdapter(core=core, factors=factors, scale=scale)


def gradient_suite(h: float = 1e-5, tolerance: float = 1e-6, only=None, seed: int = 0):
    """Run :func:`check_adapter_gradients` across the grid; returns ``[(name, report)]``."""
    return [(name, check_adapter_gradients(task, adapter, h=h, tolerance=tolerance))
            for name, task, adapter in gradcheck_cases(only, seed)]
