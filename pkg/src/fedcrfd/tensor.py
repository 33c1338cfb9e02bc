"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable value is a :class:`Tensor`. Operations build a DAG of
tensors; :func:`backward` walks it in reverse topological order and
accumulates gradients. Leaves that should be trained are
:class:`Parameter` instances, which also carry their Adam state.

Image tensors use the N x C x H x W layout.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "PRIMITIVES",
    "apply_primitive",
    "constant",
    "conv2d",
    "relu",
    "linear",
    "add",
    "avg_pool_2x",
    "upsample_2x",
    "global_avg_pool_flatten",
    "scale",
    "mean",
    "tensor_sum",
    "clamp_max",
    "latent_distance",
    "l1_loss",
    "softmax_cross_entropy",
    "softmax",
    "backward",
    "adam_step",
    "zero_grad",
    "finite_diff_check",
    "GradCheckReport",
    "NonDeterministicClosure",
    "record_kinks",
]


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class Tensor:
    """A node of the computation graph.

    ``data`` is the cached forward output, ``grad`` is filled in by
    :func:`backward`. ``parents`` and ``backward_fn`` are empty for leaves.
    """

    __slots__ = ("data", "grad", "op", "parents", "backward_fn", "requires_grad")

    def __init__(
        self,
        data,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ShapeError(f"rank {self.data.ndim} exceeds 4")
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Trainable leaf with a gradient accumulator and Adam moments."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), op="param", requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data, op="const", requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# kink recording (used by the gradient checker to skip non-smooth points)

_kink_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect sign patterns of every non-smooth op evaluated inside the block."""
    global _kink_log
    previous, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def _note_kink(arr: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(arr > 0))


# ---------------------------------------------------------------------------
# primitives


_CONV_CHUNK = 1


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """NHWC input -> (N*Ho*Wo, k*k*C) patch matrix."""
    n, h, w, c = x.shape
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        xp[:, pad:pad + h, pad:pad + w, :] = x
    else:
        xp = np.ascontiguousarray(x)
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    s = xp.strides
    view = as_strided(xp, (n, ho, wo, k, k, c), (s[0], s[1], s[2], s[1], s[2], s[3]), writeable=False)
    return view.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | str = "same") -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,k,k)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: kernel has {cw} input channels but input has {c}")
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {k}x{k2}")
    if stride != 1:
        raise ShapeError(f"conv2d: only stride 1 is supported, got {stride}")
    pad = (k - 1) // 2 if padding == "same" else int(padding)
    if not 0 <= pad <= k - 1:
        raise ShapeError(f"conv2d: padding {pad} outside [0, {k - 1}]")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k} with padding {pad}")

    # Patches are built a few samples at a time so the buffers stay in cache;
    # backward rebuilds them instead of keeping a full-batch copy alive.
    x_nhwc = x.data.transpose(0, 2, 3, 1)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = np.empty((n, o, ho, wo))
    for s in range(0, n, _CONV_CHUNK):
        part = _im2col(x_nhwc[s:s + _CONV_CHUNK], k, pad) @ wmat
        out[s:s + _CONV_CHUNK] = part.reshape(-1, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward_fn(g: np.ndarray):
        g_nhwc = g.transpose(0, 2, 3, 1)
        dwmat = np.zeros((k * k * c, o))
        dx = np.empty((n, c, h, w)) if x.requires_grad else None
        flipped = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
        for s in range(0, n, _CONV_CHUNK):
            g_part = g_nhwc[s:s + _CONV_CHUNK]
            dwmat += _im2col(x_nhwc[s:s + _CONV_CHUNK], k, pad).T @ g_part.reshape(-1, o)
            if dx is not None:
                # full correlation with the flipped kernel is another "same"-style conv
                part = _im2col(g_part, k, k - 1 - pad) @ flipped
                dx[s:s + _CONV_CHUNK] = part.reshape(-1, h, w, c).transpose(0, 3, 1, 2)
        dw = dwmat.reshape(k, k, c, o).transpose(3, 2, 0, 1)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, "conv2d", parents, backward_fn)


def relu(x: Tensor) -> Tensor:
    _note_kink(x.data)
    out = np.maximum(x.data, 0.0)
    return Tensor(out, "relu", (x,), lambda g: (g * (out > 0),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x`` (N, in) times ``weight`` (in, out) plus ``bias`` (out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g
        return (dx, dw, g.sum(axis=0)) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, "linear", parents, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, "add", (a, b), lambda g: (g, g))


def avg_pool_2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool_2x expects N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x: spatial size {h}x{w} is not even")
    d = x.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2]) * 0.25

    def backward_fn(g):
        g4 = np.broadcast_to((g * 0.25)[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2))
        return (g4.reshape(n, c, h, w),)

    return Tensor(out, "avg_pool_2x", (x,), backward_fn)


def upsample_2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_2x expects N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor(out, "upsample_2x", (x,), backward_fn)


def global_avg_pool_flatten(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool_flatten expects N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),)

    return Tensor(out, "global_avg_pool_flatten", (x,), backward_fn)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "relu": relu,
    "linear": linear,
    "add": add,
    "avg_pool_2x": avg_pool_2x,
    "upsample_2x": upsample_2x,
    "global_avg_pool_flatten": global_avg_pool_flatten,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# reductions and losses


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return Tensor(x.data * factor, "scale", (x,), lambda g: (g * factor,))


def tensor_sum(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    return Tensor(x.data.mean(), "mean", (x,), lambda g: (np.broadcast_to(g / size, x.shape),))


def clamp_max(x: Tensor, cap: float) -> Tensor:
    """Elementwise ``min(x, cap)``; the gradient is zero where ``x >= cap``."""
    _note_kink(x.data - cap)
    mask = x.data < cap
    return Tensor(np.where(mask, x.data, cap), "clamp_max", (x,), lambda g: (g * mask,))


def latent_distance(a: Tensor, b: Tensor, measure: str = "l1") -> Tensor:
    """Per-row distance between two (N, d) latent batches, returns shape (N,).

    l1: mean absolute difference per dimension.
    l2: root-mean-square difference per dimension.
    cosine: one minus cosine similarity (zero vectors have similarity 0).
    """
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"latent_distance: need equal (N, d) shapes, got {a.shape} and {b.shape}")
    d = a.shape[1]
    diff = a.data - b.data
    if measure == "l1":
        _note_kink(diff)
        out = np.abs(diff).mean(axis=1)
        sign = np.sign(diff) / d

        def backward_fn(g):
            ga = sign * g[:, None]
            return ga, -ga

    elif measure == "l2":
        out = np.sqrt((diff * diff).mean(axis=1))
        safe = np.where(out > 0, out, 1.0)
        unit = np.where(out[:, None] > 0, diff / (d * safe[:, None]), 0.0)

        def backward_fn(g):
            ga = unit * g[:, None]
            return ga, -ga

    elif measure == "cosine":
        na = np.linalg.norm(a.data, axis=1)
        nb = np.linalg.norm(b.data, axis=1)
        ok = (na > 1e-12) & (nb > 1e-12)
        denom = np.where(ok, na * nb, 1.0)
        dot = (a.data * b.data).sum(axis=1)
        cos = np.where(ok, dot / denom, 0.0)
        out = 1.0 - cos
        na_s, nb_s = np.where(ok, na, 1.0), np.where(ok, nb, 1.0)

        def backward_fn(g):
            w = np.where(ok, g, 0.0)[:, None]
            dcos_a = b.data / denom[:, None] - cos[:, None] * a.data / (na_s**2)[:, None]
            dcos_b = a.data / denom[:, None] - cos[:, None] * b.data / (nb_s**2)[:, None]
            return -w * dcos_a, -w * dcos_b

    else:
        raise ValueError(f"unknown distance measure {measure!r}")
    return Tensor(out, f"latent_distance[{measure}]", (a, b), backward_fn)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements; subgradient 0 at ties."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    _note_kink(diff)
    n = diff.size
    sign = np.sign(diff)

    def backward_fn(g):
        ga = sign * (g / n)
        return ga, -ga

    return Tensor(np.abs(diff).mean(), "l1_loss", (a, b), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, one_hot) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[true class]``."""
    labels = np.asarray(one_hot.data if isinstance(one_hot, Tensor) else one_hot, dtype=np.float64)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be N x J, got {logits.shape}")
    if labels.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("softmax_cross_entropy: every label row must be one-hot")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -(log_p * labels).sum() / n
    probs = np.exp(log_p)
    return Tensor(loss, "softmax_cross_entropy", (logits,), lambda g: ((probs - labels) * (g / n),))


# ---------------------------------------------------------------------------
# backward and optimisation


def _topological_order(roots: Sequence[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, injections: dict[Tensor, np.ndarray] | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable :class:`Parameter`.

    ``injections`` maps interior nodes to extra upstream gradients, which is
    how gradients computed elsewhere (e.g. on a server) enter the graph.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    injections = injections or {}
    roots = [root, *(n for n in injections if n is not root)]
    if not any(r.requires_grad for r in roots):
        return
    # injected nodes need not be ancestors of the root
    order = _topological_order(roots)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node, g in injections.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != node.shape:
            raise ShapeError(f"injected gradient {g.shape} does not match node {node.shape}")
        key = id(node)
        grads[key] = grads[key] + g if key in grads else g.copy()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        node.grad = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, then zero the gradients.

    A parameter whose gradient is identically zero is left untouched,
    including its moments and step counter.
    """
    for p in params:
        g = p.grad
        if not g.any():
            continue
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        g[...] = 0.0


# ---------------------------------------------------------------------------
# finite-difference gradient checking


class NonDeterministicClosure(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    excluded: int
    tolerance: float
    worst: tuple[str, int] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(
    closure: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-5,
    n_coords: int = 100,
    eps: float = 1e-6,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Checks ``n_coords`` coordinates sampled uniformly over all parameters
    (all of them if there are fewer). Coordinates whose +/- perturbation
    flips the sign pattern of any ReLU, abs or clamp input are excluded.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    with record_kinks() as base_kinks:
        first = closure().item()
    second = closure().item()
    if first != second:
        raise NonDeterministicClosure(f"closure returned {first!r} then {second!r}")

    zero_grad(params)
    backward(closure())
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def same_pattern(log: list[np.ndarray]) -> bool:
        return len(log) == len(base_kinks) and all(np.array_equal(a, b) for a, b in zip(log, base_kinks))

    worst_err, worst, checked, excluded = 0.0, None, 0, 0
    for fid in flat_ids:
        pi = int(np.searchsorted(offsets, fid, side="right") - 1)
        idx = int(fid - offsets[pi])
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        with record_kinks() as plus_kinks:
            f_plus = closure().item()
        flat[idx] = orig - eps
        with record_kinks() as minus_kinks:
            f_minus = closure().item()
        flat[idx] = orig
        if not (same_pattern(plus_kinks) and same_pattern(minus_kinks)):
            excluded += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        a = analytic[pi].reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (p.name, idx)
    notes = []
    if excluded:
        notes.append(f"{excluded} coordinate(s) excluded: perturbation crossed a kink")
    if not math.isfinite(worst_err):
        notes.append("non-finite error encountered")
    return GradCheckReport(worst_err, checked, excluded, tolerance, worst, notes)
