"""Multiply-accumulate counting and forward latency measurement."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor
from .layers import CFEBranch, Conv2d, ConvBNReLU, Module, Sequential
from .network import ArchConfig, DetectorNet


@contextmanager
def _counting():
    """Patch ``Conv2d.forward`` so every call adds its MACs to the yielded list."""
    seen: list[int] = []
    original = Conv2d.forward

    def counted(self, x):
        out = original(self, x)
        seen.append(self.macs(out.shape[2], out.shape[3]) * out.shape[0])
        return out

    Conv2d.forward = counted
    try:
        yield seen
    finally:
        Conv2d.forward = original


def count_macs(module: Module, input_shape: tuple[int, int, int, int]) -> int:
    """Convolution MACs of one forward pass on a zero input of ``input_shape``."""
    with _counting() as seen:
        module.eval()
        module(Tensor(np.zeros(input_shape, dtype=np.float32)))
    return int(sum(seen))


class _UnfactorizedBranch(Module):
    """Reference branch with a single kxk conv in place of the 1xk/kx1 pair."""

    def __init__(self, c: int, mid: int, k: int, rng):
        super().__init__()
        self.body = Sequential(ConvBNReLU(c, mid, 1, rng), ConvBNReLU(mid, mid, k, rng), ConvBNReLU(mid, c // 2, 1, rng))

    def forward(self, x):
        return self.body(x)


@dataclass
class FactorizationReport:
    channels: int
    k: int
    height: int
    width: int
    factorized_spatial: int
    unfactorized_spatial: int
    factorized_branch: int
    unfactorized_branch: int

    @property
    def spatial_ratio(self) -> float:
        return self.factorized_spatial / self.unfactorized_spatial

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial_ratio"] = self.spatial_ratio
        d["branch_ratio"] = self.factorized_branch / self.unfactorized_branch
        return d


def factorization_macs(channels: int, k: int = 7, size: int = 8, mid: int | None = None) -> FactorizationReport:
    """MACs of one CFE branch against the same branch with an unfactorized kxk conv.

    ``mid`` is the width of the spatial stage; by default it equals ``channels``
    so the spatial stages compare 2k*C^2 against k^2*C^2 per output pixel.
    """
    mid = channels if mid is None else mid
    rng = np.random.default_rng(0)
    fact = CFEBranch(channels, mid, k, rng, row_first=True)
    full = _UnfactorizedBranch(channels, mid, k, rng)
    shape = (1, channels, size, size)
    with _counting() as seen_f:
        fact.eval()
        fact(Tensor(np.zeros(shape, dtype=np.float32)))
    with _counting() as seen_u:
        full.eval()
        full(Tensor(np.zeros(shape, dtype=np.float32)))
    # call order is reduce, spatial..., expand
    return FactorizationReport(channels, k, size, size,
                               factorized_spatial=int(sum(seen_f[1:-1])), unfactorized_spatial=int(sum(seen_u[1:-1])),
                               factorized_branch=int(sum(seen_f)), unfactorized_branch=int(sum(seen_u)))


@dataclass
class LatencyStats:
    variant: str
    input_size: int
    iterations: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    macs: int
    parameters: int

    def to_dict(self) -> dict:
        return asdict(self)


def measure_latency(config: ArchConfig, iterations: int = 10, batch: int = 1, warmup: int = 1) -> LatencyStats:
    if iterations < 1:
        raise ValueError("iterations must be positive")
    net = DetectorNet(config)
    net.eval()
    x = Tensor(np.random.default_rng(0).random((batch, 3, config.input_size, config.input_size), dtype=np.float32))
    for _ in range(warmup):
        net(x)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        net(x)
        times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times)
    return LatencyStats(config.variant, config.input_size, iterations, float(arr.mean()), float(np.median(arr)),
                        float(np.percentile(arr, 95)), count_macs(net, tuple(x.shape)), net.parameter_count())
