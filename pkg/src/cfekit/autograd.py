"""Dense NCHW tensors, forward operators and a tape-based reverse mode.

Every operator takes and returns :class:`Tensor`.  When a :class:`Tape` is
active and at least one input requires a gradient, the operator appends a
backward closure to the tape; :func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised when backward is requested for a value that was never recorded."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations; single writer, one per training step."""

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def add(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        self.records.append(_Record(out, inputs, fn))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


_ACTIVE_TAPES: list[Tape] = []


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and register ``backward_fn`` on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(out_data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].add(out, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor, tape: Tape,
             params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    Sets ``.grad`` on every leaf reached.  If ``params`` is given, returns a
    gradient for each of them, zeros for parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise BackwardError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.records or not tape.produced(loss):
        raise BackwardError("backward called before a forward pass was recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, ig in zip(rec.inputs, rec.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if not tape.produced(inp):
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]

    if params is None:
        return {}
    return {name: (grads[id(p)] if id(p) in grads and id(p) in leaves else np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    weights: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4 (C_out, C_in, kH, kW), got {self.weights.shape}")
        _, _, kh, kw = self.weights.shape
        if kh < 1 or kw < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {kh}x{kw}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if isinstance(self.padding, int):
            self.padding = (self.padding, self.padding)
        if min(self.padding) < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match C_out={self.weights.shape[0]}")


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE, **kw) -> "BNParams":
        return cls(Tensor(np.ones(channels, dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype), requires_grad=True),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


# ---------------------------------------------------------------------------
# operators


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 (N,C,H,W) tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    if kh == kw == 1:
        sub = xp[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        return sub.transpose(1, 0, 2, 3).reshape(c, -1)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, -1)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    _check4(x, "conv2d")
    w = params.weights
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels C={c} do not match weight C_in={ci}")
    ph, pw = params.padding
    s = params.stride
    ho = (h + 2 * ph - kh) // s + 1
    wo = (wd + 2 * pw - kw) // s + 1
    if ho < 1 or h + 2 * ph < kh:
        raise ShapeError(f"conv2d: output height would be {ho} (H={h}, padH={ph}, kH={kh})")
    if wo < 1 or wd + 2 * pw < kw:
        raise ShapeError(f"conv2d: output width would be {wo} (W={wd}, padW={pw}, kW={kw})")

    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
        xp[:, :, ph : ph + h, pw : pw + wd] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, s, ho, wo)
    w2 = w.data.reshape(co, -1)
    out = (w2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if params.bias is not None:
        out = out + params.bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    inputs = (x, w) if params.bias is None else (x, w, params.bias)

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        dw = (g2 @ cols.T).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(ci, kh, kw, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, ph : ph + h, pw : pw + wd]
        if params.bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return record_op(out, inputs, grad_fn)


def batch_norm(x: Tensor, params: BNParams, training: bool) -> Tensor:
    _check4(x, "batch_norm")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: input has C={c} channels but gamma has length {params.gamma.shape[0]}")
    if np.any(params.running_var < 0):
        raise ValueError("batch_norm: running_var must be non-negative")
    dt = x.dtype
    gamma = params.gamma.data.reshape(1, c, 1, 1)
    beta = params.beta.data.reshape(1, c, 1, 1)

    if training:
        m = x.data.size // c
        mean64 = x.data.sum(axis=(0, 2, 3), dtype=np.float64) / m
        centered = x.data - mean64.astype(dt).reshape(1, c, 1, 1)
        var64 = np.square(centered).sum(axis=(0, 2, 3), dtype=np.float64) / m
        mom = params.momentum
        unbiased = var64 * m / (m - 1) if m > 1 else var64
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean64
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
        mean, var = mean64.astype(dt), var64.astype(dt)
    else:
        mean, var = params.running_mean.astype(dt), params.running_var.astype(dt)

    inv_std = (1.0 / np.sqrt(var + dt.type(params.eps))).reshape(1, c, 1, 1).astype(dt)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std
    out = xhat * gamma + beta

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if training:
            m = g.size // c
            dx = inv_std * (dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) / m
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m)
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return record_op(out, (x, params.gamma, params.beta), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))
    return record_op(out, (x,), lambda g: (g * mask,))


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    _check4(x, "max_pool2d")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for off in range(kernel * kernel):
            i, j = divmod(off, kernel)
            dx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g * (idx == off)
        return (dx,)

    return record_op(np.ascontiguousarray(out), (x,), grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels")
    _check4(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N,H,W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    if target_h < h or target_w < w or target_h % h or target_w % w:
        raise ShapeError(f"upsample_nearest: {h}x{w} -> {target_h}x{target_w} is not an integer upscale")
    fh, fw = target_h // h, target_w // w
    if fh == fw == 1:
        return record_op(x.data.copy(), (x,), lambda g: (g,))
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)
    return record_op(out, (x,), lambda g: (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def weighted_sum(x: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Scalar ``sum(x * weights)``; plain sum when ``weights`` is None."""
    if weights is None:
        val = x.data.sum(dtype=np.float64)
        return record_op(np.asarray(val, dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))
    w = np.asarray(weights, dtype=x.dtype)
    val = (x.data * w).sum(dtype=np.float64)
    return record_op(np.asarray(val, dtype=x.dtype), (x,), lambda g: (g * w,))


def add_scalars(*terms: Tensor) -> Tensor:
    val = sum(float(t.data) for t in terms)
    return record_op(np.asarray(val, dtype=terms[0].dtype), terms, lambda g: tuple(g for _ in terms))


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_error: float
    worst_parameter: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    n_checked: int
    per_parameter: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error < tol


MAX_CHECKED_PARAMS = 10_000
# below this magnitude the central difference is dominated by round-off, so the
# relative error is taken against the floor instead (an absolute comparison)
GRAD_FLOOR = 1e-6


def finite_diff_check(network, input, eps: float = 1e-4, loss_fn=None,
                      analytic_hook=None) -> GradCheckReport:
    """Compare tape gradients with central differences, element by element.

    Works on a float64 deep copy of ``network`` so the caller's model is left
    untouched.  ``loss_fn(net, x) -> scalar Tensor`` defaults to a fixed random
    projection of the network output.  The error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)``.
    """
    net = copy.deepcopy(network)
    net.astype(np.float64)
    params = net.named_parameters()
    total = sum(p.data.size for p in params.values())
    if total > MAX_CHECKED_PARAMS:
        raise ValueError(f"finite_diff_check: {total} parameters exceeds the limit of {MAX_CHECKED_PARAMS}")
    x = Tensor(np.asarray(input.data if isinstance(input, Tensor) else input, dtype=np.float64))

    if loss_fn is None:
        probe = net(x)
        proj = np.random.default_rng(0).standard_normal(probe.shape)
        loss_fn = lambda n, inp: weighted_sum(n(inp), proj)  # noqa: E731

    # running statistics must not drift between perturbed evaluations
    bn_state = net.state_dict(buffers_only=True)

    def evaluate() -> float:
        net.load_state_dict(bn_state, strict=False)
        return float(loss_fn(net, x).data)

    net.load_state_dict(bn_state, strict=False)
    with Tape() as tape:
        loss = loss_fn(net, x)
    analytic = backward(loss, tape, params)
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)

    worst = (0.0, "", (), 0.0, 0.0)
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        p_worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = evaluate()
            flat[k] = orig - eps
            fm = evaluate()
            flat[k] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), GRAD_FLOOR)
            if err > p_worst:
                p_worst = err
            if err > worst[0]:
                worst = (err, name, np.unravel_index(k, p.shape), float(ga[k]), num)
        per_param[name] = p_worst
    net.load_state_dict(bn_state, strict=False)
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), worst[3], worst[4],
                           total, per_param)
