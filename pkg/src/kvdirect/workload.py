"""Seeded request traces: Poisson arrivals with configurable length distributions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .eventloop import NS
from .request import Request


@dataclass(frozen=True)
class LengthDist:
    """Token-count distribution: ``fixed``, ``uniform`` or ``lognormal``.

    A log-normal is parameterised by its mean and the sigma of the
    underlying normal; samples are rounded and clipped to [low, high].
    """

    kind: str = "fixed"
    mean: float = 1.0
    sigma: float = 0.0
    low: int = 1
    high: int = 1 << 20

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown length distribution {self.kind!r}")
        if self.low < 1 or self.high < self.low:
            raise ValueError("length bounds must satisfy 1 <= low <= high")
        if self.kind != "uniform" and self.mean < 1:
            raise ValueError("mean length must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @classmethod
    def fixed(cls, n: int) -> "LengthDist":
        return cls("fixed", float(n), 0.0, 1, max(1, n))

    @classmethod
    def uniform(cls, low: int, high: int) -> "LengthDist":
        return cls("uniform", (low + high) / 2, 0.0, low, high)

    @classmethod
    def lognormal(cls, mean: float, sigma: float = 0.5, low: int = 1, high: int = 1 << 20) -> "LengthDist":
        return cls("lognormal", mean, sigma, low, high)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, int(self.mean), dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.low, self.high, endpoint=True, size=n)
        mu = math.log(self.mean) - self.sigma**2 / 2
        raw = rng.lognormal(mu, self.sigma, size=n)
        return np.clip(np.rint(raw), self.low, self.high).astype(np.int64)


PRESETS: dict[str, tuple[LengthDist, LengthDist]] = {
    "arxiv": (LengthDist.lognormal(40642, 0.5), LengthDist.lognormal(241, 0.5)),
    "sharegpt": (LengthDist.lognormal(20471, 0.5), LengthDist.lognormal(2328, 0.5)),
}
for _p in (8192, 16384, 32768, 65536):
    for _r in (128, 256, 512, 1024):
        PRESETS[f"{_p}-{_r}"] = (LengthDist.fixed(_p), LengthDist.fixed(_r))


@dataclass(frozen=True)
class WorkloadSpec:
    qps: float
    num_requests: int
    seed: int = 0
    prompt: LengthDist = LengthDist.fixed(1024)
    response: LengthDist = LengthDist.fixed(64)

    def __post_init__(self) -> None:
        if not self.qps > 0:
            raise ValueError("qps must be positive")
        if self.num_requests < 1:
            raise ValueError("need at least one request")

    @classmethod
    def preset(cls, name: str, qps: float, num_requests: int, seed: int = 0) -> "WorkloadSpec":
        try:
            prompt, response = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown workload preset {name!r}; known: {sorted(PRESETS)}") from None
        return cls(qps, num_requests, seed, prompt, response)


def generate_arrivals(spec: WorkloadSpec) -> list[Request]:
    """Requests with exponential inter-arrival gaps (mean 1/qps), ids from 1."""
    rng = np.random.default_rng(spec.seed)
    gaps = rng.exponential(1.0 / spec.qps, size=spec.num_requests)
    prompts = spec.prompt.sample(rng, spec.num_requests)
    responses = spec.response.sample(rng, spec.num_requests)
    arrivals = np.rint(np.cumsum(gaps) * NS).astype(np.int64)
    return [Request(i + 1, int(p), int(r), int(t))
            for i, (t, p, r) in enumerate(zip(arrivals, prompts, responses))]
