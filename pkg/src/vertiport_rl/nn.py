"""Dense 2-D tensors with reverse-mode differentiation, sized for tiny graphs.

Everything is a float64 matrix.  Forward passes build a record of operations;
``backward`` replays it in reverse topological order.  Matrices here are a
few dozen rows at most, so plain numpy kernels are plenty and the engine
stays small enough to audit.

Gradient semantics: ``backward(loss)`` overwrites the gradients of every
parameter reachable from ``loss``; pass ``accumulate=True`` to sum into the
existing gradients instead (minibatch accumulation).
"""
from __future__ import annotations

import json
import os
import tempfile
from typing import Callable, Optional

import numpy as np

RRELU_LOW = 0.1
RRELU_HIGH = 0.3
RRELU_EVAL_SLOPE = 0.2  # midpoint of the training slope range


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """One node of the recorded computation: a matrix plus a backward rule."""

    __slots__ = ("value", "grad", "parents", "bwd", "store")

    def __init__(self, value, parents=(), bwd=None, store=None):
        self.value = _as_matrix(value)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.bwd = bwd
        self.store = store  # set only on parameter leaves

    @property
    def shape(self):
        return self.value.shape


def const(value) -> Tensor:
    return Tensor(value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


class ParamStore:
    """Named parameter leaves in a stable order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.grads_computed = False

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(value, store=self)
        t.grad = np.zeros_like(t.value)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0
        self.grads_computed = False

    def scale_grads(self, factor: float) -> None:
        for t in self._params.values():
            t.grad *= factor

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self._params.values())


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate parameter gradients for a scalar (1x1) loss."""
    if loss.value.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 loss, got shape {loss.value.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    if not accumulate:
        for node in order:
            if node.store is not None:
                node.grad[...] = 0.0
    for node in order:
        if node.store is None:
            node.grad = None

    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)
        if node.store is not None:
            node.store.grads_computed = True


# -- operations -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = Tensor(a.value @ b.value, parents=(a, b))

    def bwd(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)
    out.bwd = bwd
    return out


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value + b.value, parents=(a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, g)
    out.bwd = bwd
    return out


def add_rowvec(x, b) -> Tensor:
    """x (n, f) plus a broadcast bias row (1, f)."""
    x, b = _wrap(x), _wrap(b)
    if b.value.shape != (1, x.value.shape[1]):
        raise ValueError(f"bias shape {b.value.shape} does not match input {x.value.shape}")
    out = Tensor(x.value + b.value, parents=(x, b))

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0, keepdims=True))
    out.bwd = bwd
    return out


def _rrelu_grad(upstream: np.ndarray, x_value: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    return upstream * np.where(x_value >= 0.0, 1.0, slopes)


def rrelu(x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Leaky rectifier with a randomized negative slope while training.

    Slopes draw uniformly from [0.1, 0.3] per element; evaluation uses the
    fixed midpoint 0.2 so inference is deterministic.
    """
    x = _wrap(x)
    if training:
        if rng is None:
            raise ValueError("rrelu in training mode needs an rng for slope draws")
        slopes = rng.uniform(RRELU_LOW, RRELU_HIGH, size=x.value.shape)
    else:
        slopes = np.full(x.value.shape, RRELU_EVAL_SLOPE)
    out = Tensor(np.where(x.value >= 0.0, x.value, slopes * x.value), parents=(x,))

    def bwd(g):
        _accum(x, _rrelu_grad(g, x.value, slopes))
    out.bwd = bwd
    return out


def mean_rows(x) -> Tensor:
    x = _wrap(x)
    n = x.value.shape[0]
    out = Tensor(x.value.mean(axis=0, keepdims=True), parents=(x,))

    def bwd(g):
        _accum(x, np.repeat(g, n, axis=0) / n)
    out.bwd = bwd
    return out


def take_row(x, index: int) -> Tensor:
    x = _wrap(x)
    if not 0 <= index < x.value.shape[0]:
        raise ValueError(f"row index {index} out of range for shape {x.value.shape}")
    out = Tensor(x.value[index:index + 1, :], parents=(x,))

    def bwd(g):
        full = np.zeros_like(x.value)
        full[index, :] = g[0]
        _accum(x, full)
    out.bwd = bwd
    return out


def concat_cols(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    for p in parts:
        if p.value.shape[0] != 1:
            raise ValueError("concat_cols expects 1-row matrices")
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), parents=tuple(parts))
    widths = [p.value.shape[1] for p in parts]

    def bwd(g):
        start = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, start:start + w])
            start += w
    out.bwd = bwd
    return out


def masked_log_softmax(x, mask) -> Tensor:
    """Row log-softmax over the unmasked entries; masked entries come out -inf."""
    x = _wrap(x)
    mask = np.asarray(mask, dtype=bool).reshape(x.value.shape)
    if not mask.any():
        raise ValueError("masked_log_softmax: mask leaves no entries")
    z = np.where(mask, x.value, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    exp = np.where(mask, np.exp(z - zmax), 0.0)
    total = exp.sum(axis=1, keepdims=True)
    logp = np.where(mask, z - zmax - np.log(total), -np.inf)
    out = Tensor(logp, parents=(x,))
    softmax = exp / total

    def bwd(g):
        g = np.where(mask, g, 0.0)
        _accum(x, np.where(mask, g - softmax * g.sum(axis=1, keepdims=True), 0.0))
    out.bwd = bwd
    return out


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    return masked_log_softmax(x, np.ones(x.value.shape, dtype=bool))


def gather(x, index: int) -> Tensor:
    """Single entry of a 1-row matrix, kept 1x1."""
    x = _wrap(x)
    if x.value.shape[0] != 1 or not 0 <= index < x.value.shape[1]:
        raise ValueError(f"gather index {index} invalid for shape {x.value.shape}")
    out = Tensor(x.value[:, index:index + 1], parents=(x,))

    def bwd(g):
        full = np.zeros_like(x.value)
        full[0, index] = g[0, 0]
        _accum(x, full)
    out.bwd = bwd
    return out


def entropy_from_log_probs(logp, mask) -> Tensor:
    """Shannon entropy of exp(logp) restricted to the unmasked entries."""
    logp = _wrap(logp)
    mask = np.asarray(mask, dtype=bool).reshape(logp.value.shape)
    safe = np.where(mask, logp.value, 0.0)
    p = np.where(mask, np.exp(safe), 0.0)
    value = -(p * safe).sum()
    out = Tensor([[value]], parents=(logp,))

    def bwd(g):
        _accum(logp, np.where(mask, -g[0, 0] * p * (safe + 1.0), 0.0))
    out.bwd = bwd
    return out


def exp_of(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.exp(x.value), parents=(x,))

    def bwd(g):
        _accum(x, g * out.value)
    out.bwd = bwd
    return out


def add_scalar(x, c: float) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value + c, parents=(x,))

    def bwd(g):
        _accum(x, g)
    out.bwd = bwd
    return out


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value * c, parents=(x,))

    def bwd(g):
        _accum(x, g * c)
    out.bwd = bwd
    return out


def square(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value ** 2, parents=(x,))

    def bwd(g):
        _accum(x, 2.0 * g * x.value)
    out.bwd = bwd
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the smaller branch (ties go left)."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.value <= b.value
    out = Tensor(np.where(take_a, a.value, b.value), parents=(a, b))

    def bwd(g):
        _accum(a, np.where(take_a, g, 0.0))
        _accum(b, np.where(take_a, 0.0, g))
    out.bwd = bwd
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    """Gradient is 1 inside [lo, hi] and 0 where the value was clipped."""
    x = _wrap(x)
    inside = (x.value >= lo) & (x.value <= hi)
    out = Tensor(np.clip(x.value, lo, hi), parents=(x,))

    def bwd(g):
        _accum(x, np.where(inside, g, 0.0))
    out.bwd = bwd
    return out


def sum_all(x) -> Tensor:
    x = _wrap(x)
    out = Tensor([[x.value.sum()]], parents=(x,))

    def bwd(g):
        _accum(x, np.full_like(x.value, g[0, 0]))
    out.bwd = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value * b.value, parents=(a, b))

    def bwd(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)
    out.bwd = bwd
    return out


# -- graph convolution ------------------------------------------------------

def normalize_adjacency(a) -> np.ndarray:
    """Symmetric degree normalization of a 0/1 adjacency with self-loops added."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if not np.isin(a, (0.0, 1.0)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_layer_forward(h, a_norm, w, b, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    """One propagation layer: rectified (A_norm . H . W + bias)."""
    h = _wrap(h)
    a_const = a_norm if isinstance(a_norm, Tensor) else const(a_norm)
    if a_const.value.shape[1] != h.value.shape[0]:
        raise ValueError(
            f"adjacency {a_const.value.shape} does not match node matrix {h.value.shape}")
    mixed = matmul(a_const, h)
    projected = matmul(mixed, w)
    return rrelu(add_rowvec(projected, b), training=training, rng=rng)


# -- optimizer --------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a ParamStore."""

    def __init__(self, store: ParamStore, learning_rate: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in store.items()}

    def step(self) -> None:
        if not self.store.grads_computed:
            raise RuntimeError("adam step requested before any gradients were computed")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path: str, config_hash: str,
                    meta: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.value.shape), "data": [float(v) for v in p.value.ravel()]}
            for name, p in store.items()
        },
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str, expected_config_hash: Optional[str] = None,
                    expected_shapes: Optional[dict] = None):
    """Read a checkpoint back into a fresh ParamStore.

    Returns (store, payload_meta). Nothing is constructed until the whole
    file parses, so a truncated file cannot produce partial state.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"checkpoint {path} is truncated or corrupt: {exc}") from None
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint {path}: unsupported format_version {payload.get('format_version')!r}")
    found_hash = payload.get("config_hash")
    if expected_config_hash is not None and found_hash != expected_config_hash:
        raise ValueError(
            f"checkpoint config hash {found_hash} does not match current config "
            f"hash {expected_config_hash}")

    params = payload.get("params")
    if not isinstance(params, dict):
        raise ValueError(f"checkpoint {path}: missing params table")
    store = ParamStore()
    for name, entry in params.items():
        shape = tuple(entry["shape"])
        data = np.array(entry["data"], dtype=np.float64)
        if data.size != shape[0] * shape[1]:
            raise ValueError(
                f"checkpoint tensor {name}: {data.size} values do not fill shape {shape}")
        if expected_shapes is not None and name in expected_shapes \
                and tuple(expected_shapes[name]) != shape:
            raise ValueError(
                f"checkpoint tensor {name}: shape {shape} does not match expected "
                f"{tuple(expected_shapes[name])}")
        store.add(name, data.reshape(shape))
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(store.names())
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
    meta = {"config_hash": found_hash, **payload.get("meta", {})}
    return store, meta


# -- verification -----------------------------------------------------------

def finite_difference_check(build_loss: Callable[[], Tensor], store: ParamStore,
                            coords=None, h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``coords``: iterable of (param_name, flat_index); all coordinates when
    omitted.  The loss builder must be deterministic between calls.
    """
    store.zero_grads()
    backward(build_loss())
    analytic = {name: p.grad.copy() for name, p in store.items()}

    if coords is None:
        coords = [(name, i) for name, p in store.items() for i in range(p.value.size)]

    worst = 0.0
    for name, flat in coords:
        p = store[name]
        original = p.value.flat[flat]
        p.value.flat[flat] = original + h
        f_plus = build_loss().value[0, 0]
        p.value.flat[flat] = original - h
        f_minus = build_loss().value[0, 0]
        p.value.flat[flat] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name].flat[flat]
        err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
