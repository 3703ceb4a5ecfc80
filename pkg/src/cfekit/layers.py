"""Parameterized layers, the CFE and FFB blocks, and the Inception comparison block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    DEFAULT_DTYPE,
    BNParams,
    ConvParams,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    max_pool2d,
    relu,
    upsample_nearest,
)


@dataclass(frozen=True)
class RField:
    """Receptive field (rows, cols) in input pixels and the cumulative stride."""

    size_h: int = 1
    size_w: int = 1
    jump_h: int = 1
    jump_w: int = 1

    def through(self, kh: int, kw: int, stride: int = 1) -> "RField":
        return RField(self.size_h + (kh - 1) * self.jump_h, self.size_w + (kw - 1) * self.jump_w,
                      self.jump_h * stride, self.jump_w * stride)

    def union(self, other: "RField") -> "RField":
        return RField(max(self.size_h, other.size_h), max(self.size_w, other.size_w),
                      min(self.jump_h, other.jump_h), min(self.jump_w, other.jump_w))

    @property
    def size(self) -> int:
        return max(self.size_h, self.size_w)


class Module:
    """Container base class: attributes holding Tensors or Modules are registered by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):
        raise NotImplementedError

    def receptive(self, rf: RField) -> RField:
        raise NotImplementedError(f"{type(self).__name__} does not define a receptive field")

    # -- parameter bookkeeping ------------------------------------------------

    def _own_params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._own_params().items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._own_buffers().items()}
        for name, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def state_dict(self, buffers_only: bool = False) -> dict[str, np.ndarray]:
        state = {} if buffers_only else {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                if strict:
                    raise KeyError(f"unexpected entry {name!r} in state")
                continue
            if target.shape != tuple(arr.shape):
                raise ShapeError(f"{name}: stored shape {tuple(arr.shape)} != model shape {target.shape}")
            target[...] = arr
        if strict:
            missing = (set(params) | set(buffers)) - set(state)
            if missing:
                raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")

    def astype(self, dtype) -> "Module":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for child in self._children.values():
            child._cast_buffers(dtype)

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator,
                 stride: int = 1, padding=None, bias: bool = True):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding is None:
            # "same" padding: floor(k/2) on each axis, so 1xk pads only the width
            padding = (kh // 2, kw // 2)
        elif isinstance(padding, int):
            padding = (padding, padding)
        w = Tensor(he_uniform(rng, (c_out, c_in, kh, kw)), requires_grad=True)
        b = Tensor(np.zeros(c_out, DEFAULT_DTYPE), requires_grad=True) if bias else None
        self.params = ConvParams(w, b, stride, tuple(padding))

    @property
    def weight(self) -> Tensor:
        return self.params.weights

    @property
    def bias(self) -> Tensor | None:
        return self.params.bias

    def _own_params(self):
        out = {"weight": self.params.weights}
        if self.params.bias is not None:
            out["bias"] = self.params.bias
        return out

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params)

    def receptive(self, rf: RField) -> RField:
        _, _, kh, kw = self.params.weights.shape
        return rf.through(kh, kw, self.params.stride)

    def macs(self, h_out: int, w_out: int) -> int:
        co, ci, kh, kw = self.params.weights.shape
        return co * ci * kh * kw * h_out * w_out


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.params = BNParams.fresh(channels, eps=eps, momentum=momentum)

    def _own_params(self):
        return {"gamma": self.params.gamma, "beta": self.params.beta}

    def _own_buffers(self):
        return {"running_mean": self.params.running_mean, "running_var": self.params.running_var}

    def _cast_buffers(self, dtype):
        self.params.running_mean = self.params.running_mean.astype(dtype)
        self.params.running_var = self.params.running_var.astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.params, self.training)

    def receptive(self, rf):
        return rf


class ConvBNReLU(Module):
    """conv (bias-free) -> batch norm -> ReLU."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=padding, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))

    def receptive(self, rf):
        return self.conv.receptive(rf)


class MaxPool(Module):
    def __init__(self, kernel: int = 2, stride: int | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def forward(self, x):
        return max_pool2d(x, self.kernel, self.stride)

    def receptive(self, rf):
        return rf.through(self.kernel, self.kernel, self.stride)


class Identity(Module):
    def forward(self, x):
        return x

    def receptive(self, rf):
        return rf


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.order = []
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
            self.order.append(layer)

    def forward(self, x):
        for layer in self.order:
            x = layer(x)
        return x

    def receptive(self, rf):
        for layer in self.order:
            rf = layer.receptive(rf)
        return rf


def _receptive_parallel(rf: RField, branches) -> RField:
    out = None
    for br in branches:
        r = br.receptive(rf)
        out = r if out is None else out.union(r)
    return out


# ---------------------------------------------------------------------------
# feature enhancement blocks


@dataclass(frozen=True)
class CFEConfig:
    channels_in: int
    k: int = 7
    bottleneck_ratio: float = 0.5
    branch_scale: float = 1.0  # initial gamma of each branch's last BN

    def __post_init__(self):
        if not self.branch_scale > 0:
            raise ValueError(f"branch_scale must be positive, got {self.branch_scale}")
        if self.channels_in < 1:
            raise ValueError("channels_in must be positive")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be an odd positive integer, got {self.k}")
        if not 0 < self.bottleneck_ratio <= 1:
            raise ValueError(f"bottleneck_ratio must lie in (0, 1], got {self.bottleneck_ratio}")
        mid = self.channels_in * self.bottleneck_ratio
        if mid != int(mid) or mid < 1:
            raise ValueError(f"channels_in={self.channels_in} is not divisible by 1/bottleneck_ratio")
        if self.bottleneck_ratio == 0.5 and self.channels_in % 2:
            raise ValueError(f"channels_in={self.channels_in} must be even for bottleneck_ratio 0.5")
        if self.channels_in % 2:
            raise ValueError("channels_in must be even so the two branches concatenate back to C")

    @property
    def mid(self) -> int:
        return int(self.channels_in * self.bottleneck_ratio)


class CFEBranch(Module):
    def __init__(self, c: int, mid: int, k: int, rng, row_first: bool):
        super().__init__()
        half = c // 2
        first, second = ((1, k), (k, 1)) if row_first else ((k, 1), (1, k))
        self.reduce = ConvBNReLU(c, mid, 1, rng)
        self.spatial_a = ConvBNReLU(mid, mid, first, rng)
        self.spatial_b = ConvBNReLU(mid, mid, second, rng)
        self.expand = ConvBNReLU(mid, half, 1, rng)
        self.row_first = row_first

    def forward(self, x):
        return self.expand(self.spatial_b(self.spatial_a(self.reduce(x))))

    def receptive(self, rf):
        for layer in (self.reduce, self.spatial_a, self.spatial_b, self.expand):
            rf = layer.receptive(rf)
        return rf

    def convs(self) -> list[Conv2d]:
        return [self.reduce.conv, self.spatial_a.conv, self.spatial_b.conv, self.expand.conv]


class CFEBlock(Module):
    """Two-branch block: 1x1 -> 1xk -> kx1 -> 1x1 and the same with the
    spatial pair reversed; branches are concatenated, added to the input and
    passed through a final ReLU.  Output shape equals input shape."""

    def __init__(self, config: CFEConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config.channels_in
        self.left = CFEBranch(c, config.mid, config.k, rng, row_first=True)
        self.right = CFEBranch(c, config.mid, config.k, rng, row_first=False)
        if config.branch_scale != 1.0:
            # a small residual contribution at init keeps the block close to identity early in training
            for branch in (self.left, self.right):
                branch.expand.bn.params.gamma.data[:] = config.branch_scale

    def forward(self, x):
        if x.shape[1] != self.config.channels_in:
            raise ShapeError(f"CFE expects {self.config.channels_in} channels, got {x.shape[1]}")
        merged = concat_channels(self.left(x), self.right(x))
        return relu(add(merged, x))

    def receptive(self, rf):
        return _receptive_parallel(rf, (self.left, self.right))


def build_cfe(config: CFEConfig, rng: np.random.Generator | None = None) -> CFEBlock:
    return CFEBlock(config, rng if rng is not None else np.random.default_rng(0))


class InceptionBlock(Module):
    """Parallel 1x1 (C/4), 3x3 (C/4) and two stacked 3x3 (C/2) paths, concatenated to C."""

    def __init__(self, channels: int, rng):
        super().__init__()
        if channels % 4:
            raise ValueError(f"Inception block needs channels divisible by 4, got {channels}")
        q = channels // 4
        self.p1 = ConvBNReLU(channels, q, 1, rng)
        self.p3 = ConvBNReLU(channels, q, 3, rng)
        self.p5 = Sequential(ConvBNReLU(channels, 2 * q, 3, rng), ConvBNReLU(2 * q, 2 * q, 3, rng))

    def forward(self, x):
        return concat_channels(concat_channels(self.p1(x), self.p3(x)), self.p5(x))

    def receptive(self, rf):
        return _receptive_parallel(rf, (self.p1, self.p3, self.p5))


@dataclass(frozen=True)
class FFBConfig:
    channels_a: int
    channels_b: int
    channels_out: int

    def __post_init__(self):
        if min(self.channels_a, self.channels_b, self.channels_out) < 1:
            raise ValueError("FFB channel counts must be positive")


class FFBBlock(Module):
    """Fuse an earlier (larger) tap ``a`` with a deeper (smaller) tap ``b``.

    Both are projected by 1x1 convs, ``b`` is nearest-upsampled to ``a``'s size,
    and the concatenation goes through a 1x1 conv+bn+relu.
    """

    def __init__(self, config: FFBConfig, rng):
        super().__init__()
        self.config = config
        self.proj_a = Conv2d(config.channels_a, config.channels_out, 1, rng, bias=False)
        self.proj_b = Conv2d(config.channels_b, config.channels_out, 1, rng, bias=False)
        self.fuse = ConvBNReLU(2 * config.channels_out, config.channels_out, 1, rng)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        ha, wa = a.shape[2:]
        hb, wb = b.shape[2:]
        if ha < hb or wa < wb or ha % hb or wa % wb:
            raise ShapeError(f"FFB: source sizes {ha}x{wa} and {hb}x{wb} differ by a non-integer factor")
        pa = self.proj_a(a)
        pb = upsample_nearest(self.proj_b(b), ha, wa)
        return self.fuse(concat_channels(pa, pb))

    def receptive2(self, rf_a: RField, rf_b: RField) -> RField:
        ra = self.proj_a.receptive(rf_a)
        rb = self.proj_b.receptive(rf_b)
        # nearest upsampling copies deeper cells; the output grid is a's grid
        merged = RField(max(ra.size_h, rb.size_h), max(ra.size_w, rb.size_w), ra.jump_h, ra.jump_w)
        return self.fuse.receptive(merged)


def build_ffb(config: FFBConfig, rng: np.random.Generator | None = None) -> FFBBlock:
    return FFBBlock(config, rng if rng is not None else np.random.default_rng(0))
