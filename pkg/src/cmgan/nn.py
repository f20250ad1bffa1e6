"""Dense-network numerical core with hand-written backward passes.

Everything runs in float64. Layers are plain parameter containers
(:class:`LayerParams`) wrapped by :class:`Dense`, which adds the
activation and the batch-norm switch. Forward passes return ``(output,
cache)``; the cache is consumed by :func:`dense_backward`.

Parameter sharing is by object identity: two ``Dense`` wrappers that hold
the same ``LayerParams`` instance read and write the same arrays, and
:class:`GradStore` keys its buffers on that identity, so gradients coming
from both users are summed into one buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DegenerateBatchError, DivergenceError, DomainError, ShapeError, UsageError

BN_EPS = 1e-12
BN_MOMENTUM = 0.9
SCORE_CLAMP = 1e-7

ACTIVATIONS = ("identity", "relu", "sigmoid", "softmax")
TRAINABLE = ("weight", "bias", "bn_gamma", "bn_beta")


@dataclass(eq=False)
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None
    shared_id: str | None = None

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
             batch_norm: bool = False, shared_id: str | None = None, zero: bool = False) -> LayerParams:
        """Glorot-uniform weights, zero bias, identity batch-norm."""
        if zero or rng is None:
            weight = np.zeros((in_dim, out_dim))
        else:
            a = np.sqrt(6.0 / (in_dim + out_dim))
            weight = rng.uniform(-a, a, size=(in_dim, out_dim))
        p = cls(weight=weight, bias=np.zeros(out_dim), shared_id=shared_id)
        if batch_norm:
            p.bn_gamma = np.ones(out_dim)
            p.bn_beta = np.zeros(out_dim)
            p.bn_running_mean = np.zeros(out_dim)
            p.bn_running_var = np.ones(out_dim)
        return p

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in TRAINABLE if getattr(self, k) is not None}

    def state(self) -> dict[str, np.ndarray]:
        """All arrays, including running statistics."""
        names = TRAINABLE + ("bn_running_mean", "bn_running_var")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


@dataclass(eq=False)
class Dense:
    params: LayerParams
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.params.in_dim

    @property
    def out_dim(self) -> int:
        return self.params.out_dim


@dataclass
class DenseCache:
    layer: Dense
    x: np.ndarray
    y: np.ndarray
    act_in: np.ndarray
    bn_mode: str | None = None  # "batch" or "running"
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None


class GradStore:
    """Gradient buffers keyed by parameter-object identity."""

    def __init__(self):
        self._entries: dict[int, tuple[LayerParams, dict[str, np.ndarray]]] = {}

    def buffers(self, p: LayerParams) -> dict[str, np.ndarray]:
        entry = self._entries.get(id(p))
        if entry is None:
            entry = (p, {k: np.zeros_like(v) for k, v in p.trainable().items()})
            self._entries[id(p)] = entry
        return entry[1]

    def get(self, p: LayerParams) -> dict[str, np.ndarray] | None:
        entry = self._entries.get(id(p))
        return None if entry is None else entry[1]

    def __contains__(self, p: LayerParams) -> bool:
        return id(p) in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def zero(self):
        for _, bufs in self._entries.values():
            for b in bufs.values():
                b.fill(0.0)


def _check_input(x: np.ndarray, layer: Dense) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"expected input with {layer.in_dim} columns, got shape {x.shape}")
    return x


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "sigmoid":
        return sigmoid(a)
    return softmax(a)


def _activate_backward(g: np.ndarray, cache: DenseCache) -> np.ndarray:
    kind = cache.layer.activation
    if kind == "identity":
        return g
    if kind == "relu":
        return g * (cache.act_in > 0)
    y = cache.y
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def dense_forward(x: np.ndarray, layer: Dense, mode: str = "train",
                  update_stats: bool = True) -> tuple[np.ndarray, DenseCache]:
    """``act(bn(x @ W + b))``.

    In ``train`` mode batch-norm uses batch statistics and, when
    ``update_stats`` is set, folds them into the running averages. In
    ``infer`` mode the running statistics are used.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _check_input(x, layer)
    p = layer.params
    z = x @ p.weight + p.bias
    cache = DenseCache(layer=layer, x=x, y=z, act_in=z)
    if p.has_bn:
        if mode == "train":
            n = z.shape[0]
            if n == 0:
                raise DegenerateBatchError("batch-norm in train mode needs at least one row")
            mean = z.mean(axis=0)
            var = ((z - mean) ** 2).mean(axis=0)
            if update_stats:
                p.bn_running_mean *= BN_MOMENTUM
                p.bn_running_mean += (1.0 - BN_MOMENTUM) * mean
                unbiased = var * n / (n - 1) if n > 1 else var
                p.bn_running_var *= BN_MOMENTUM
                p.bn_running_var += (1.0 - BN_MOMENTUM) * unbiased
            cache.bn_mode = "batch"
        else:
            mean, var = p.bn_running_mean, p.bn_running_var
            cache.bn_mode = "running"
        cache.inv_std = 1.0 / np.sqrt(var + BN_EPS)
        cache.xhat = (z - mean) * cache.inv_std
        cache.act_in = p.bn_gamma * cache.xhat + p.bn_beta
    cache.y = _activate(cache.act_in, layer.activation)
    return cache.y, cache


def dense_backward(grad_out: np.ndarray, cache: DenseCache | None,
                   grads: GradStore | None = None) -> np.ndarray:
    """Backpropagate through one layer; accumulate parameter gradients into
    ``grads`` (skipped when ``grads`` is None) and return dL/dx."""
    if cache is None:
        raise UsageError("dense_backward called without a forward cache")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.y.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {cache.y.shape}")
    p = cache.layer.params
    da = _activate_backward(grad_out, cache)
    bufs = grads.buffers(p) if grads is not None else None
    if p.has_bn:
        if bufs is not None:
            bufs["bn_gamma"] += np.sum(da * cache.xhat, axis=0)
            bufs["bn_beta"] += np.sum(da, axis=0)
        dxhat = da * p.bn_gamma
        if cache.bn_mode == "batch":
            n = dxhat.shape[0]
            dz = (cache.inv_std / n) * (
                n * dxhat
                - dxhat.sum(axis=0)
                - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
            )
        else:
            dz = dxhat * cache.inv_std
    else:
        dz = da
    if bufs is not None:
        bufs["weight"] += cache.x.T @ dz
        bufs["bias"] += dz.sum(axis=0)
    return dz @ p.weight.T


def sequential_forward(x, layers: Iterable[Dense], mode="train", update_stats=True):
    caches = []
    for layer in layers:
        x, c = dense_forward(x, layer, mode, update_stats)
        caches.append(c)
    return x, caches


def sequential_backward(grad, caches, grads: GradStore | None = None):
    for c in reversed(caches):
        grad = dense_backward(grad, c, grads)
    return grad


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels])) if n else 0.0
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / max(n, 1)


def sigmoid_score(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 1:
        raise ShapeError(f"scores need a single column, got shape {x.shape}")
    return sigmoid(x)


def log_likelihood(p: np.ndarray, real: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``log p`` (real) or ``log(1 - p)`` (fake) on clamped scores,
    with the derivative w.r.t. ``p``; the derivative is zero where the clamp
    is active."""
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    inside = (p >= SCORE_CLAMP) & (p <= 1.0 - SCORE_CLAMP)
    if real:
        return np.log(q), np.where(inside, 1.0 / q, 0.0)
    return np.log1p(-q), np.where(inside, -1.0 / (1.0 - q), 0.0)


def _unique_params(layers) -> list[LayerParams]:
    seen, out = set(), []
    for item in layers:
        p = item.params if isinstance(item, Dense) else item
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _check_finite(params: list[LayerParams], grads: GradStore):
    for p in params:
        bufs = grads.get(p)
        if bufs is None:
            continue
        for name, g in bufs.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {p.shared_id or 'layer'}.{name}")


def sgd_step(layers, grads: GradStore, lr: float):
    """In-place ``p -= lr * g`` for every distinct parameter object.

    Shared parameters appear once no matter how many layers reference them,
    so they are updated exactly once with their summed gradient. Layers
    without a gradient buffer are left untouched.
    """
    params = _unique_params(layers)
    _check_finite(params, grads)
    for p in params:
        bufs = grads.get(p)
        if bufs is None:
            continue
        for name, g in bufs.items():
            getattr(p, name).__isub__(lr * g)


class SGD:
    """Plain SGD with optional heavy-ball momentum (default off)."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, layers, grads: GradStore):
        if self.momentum == 0.0:
            sgd_step(layers, grads, self.lr)
            return
        params = _unique_params(layers)
        _check_finite(params, grads)
        for p in params:
            bufs = grads.get(p)
            if bufs is None:
                continue
            for name, g in bufs.items():
                key = (id(p), name)
                v = self._velocity.get(key)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[key] = v
                getattr(p, name).__isub__(self.lr * v)


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    checked: int = 0
    worst: tuple[str, str, tuple] | None = None
    per_array: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(params: Mapping[str, LayerParams | Dense] | Iterable,
                   loss_fn: Callable[[GradStore | None], float],
                   tolerance: float = 1e-4, step: float = 1e-5,
                   max_entries: int | None = None,
                   rng: np.random.Generator | None = None,
                   floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(grads)`` must return the scalar loss at the current parameter
    values and, when ``grads`` is not None, accumulate the analytic
    gradients into it. With ``max_entries`` set, only that many randomly
    chosen entries of each array are perturbed.

    The relative error divides by ``max(|analytic|, |numeric|, floor * max(1, |loss|))``.
    Central differences in float64 carry round-off of order
    ``eps * |loss| / step``; the scaled floor keeps gradients that are
    exactly zero (a bias feeding batch norm, say) from being judged on that
    noise alone.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(f"layer{i}", p) for i, p in enumerate(params)]
    seen, unique = set(), []
    for name, p in named:
        p = p.params if isinstance(p, Dense) else p
        if id(p) not in seen:
            seen.add(id(p))
            unique.append((name, p))
    report = GradCheckReport(tolerance=tolerance)
    if not unique:
        return report
    grads = GradStore()
    base = loss_fn(grads)
    floor = floor * max(1.0, abs(float(base)))
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, p in unique:
        bufs = grads.get(p) or {}
        for arr_name, arr in p.trainable().items():
            analytic = bufs.get(arr_name, np.zeros_like(arr))
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn(None)
                flat[i] = orig - step
                down = loss_fn(None)
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                err = float(relative_error(analytic.reshape(-1)[i], numeric, floor))
                report.checked += 1
                if err > worst:
                    worst = err
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst = (name, arr_name, np.unravel_index(i, arr.shape))
            report.per_array[f"{name}.{arr_name}"] = worst
    return report
