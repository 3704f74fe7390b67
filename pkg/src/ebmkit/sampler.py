"""Langevin sampling over model inputs, with a replay buffer.

Chains follow x_{i+1} = x_i - (step/2) * dE/dx + noise, where the noise
is zero-mean Gaussian with variance equal to the current step size (an
independent noise-scale override exists but defaults off). The step
size follows a polynomial decay step * (i+1)^(-decay_exponent); the
exponent defaults to 0 (constant step).

Chains are monitored for the documented failure mode of unbounded
growth: any non-finite coordinate, or any coordinate beyond the
divergence bound, freezes that chain and flags it. Diverged samples are
reported, never cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from . import energy as en

__all__ = [
    "SgldConfig", "ReplayBuffer", "DivergenceReport", "ChainResult",
    "buffer_draw", "buffer_push", "sgld_chain", "sgld_chain_deterministic",
    "QuadraticBowlEnergy", "ConcaveBowlEnergy",
]


@dataclass(frozen=True)
class SgldConfig:
    """Chain hyperparameters. Defaults: 20 steps, constant step size,
    uniform init on [-1, 1] per coordinate, divergence bound at 10x the
    half-width of the init interval."""

    n_steps: int = 20
    step_size: float = 1.0
    decay_exponent: float = 0.0
    init_lo: float = -1.0
    init_hi: float = 1.0
    noise: bool = True
    noise_scale: Optional[float] = None   # None -> std = sqrt(current step)
    divergence_bound: Optional[float] = None
    convergence_eta: float = 1e-3

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not self.init_lo < self.init_hi:
            raise ValueError("init bounds must satisfy lo < hi")

    @property
    def bound(self) -> float:
        if self.divergence_bound is not None:
            return self.divergence_bound
        return 10.0 * (self.init_hi - self.init_lo) / 2.0

    def step_at(self, i: int) -> float:
        return self.step_size * (i + 1) ** (-self.decay_exponent)


@dataclass
class DivergenceReport:
    """First detected chain failure within a batch, if any."""

    diverged: bool = False
    step: Optional[int] = None
    magnitude: Optional[float] = None
    reason: Optional[str] = None          # "non-finite" | "bound-exceeded"
    diverged_mask: Optional[np.ndarray] = None  # per-chain flags


@dataclass
class ChainResult:
    samples: np.ndarray
    report: DivergenceReport
    egm_trace: Optional[list] = None      # deterministic chains only
    converged: Optional[bool] = None


class ReplayBuffer:
    """FIFO store of past chain endpoints.

    Draws reuse a cached sample with probability 1 - reinit_prob and
    reinitialize from the uniform init distribution otherwise. Samples
    that are non-finite or outside the sanity bound are never stored.
    """

    def __init__(self, capacity: int = 10000, reinit_prob: float = 0.05,
                 rng: Union[np.random.Generator, int, None] = None,
                 sanity_bound: Optional[float] = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= reinit_prob <= 1.0:
            raise ValueError("reinit_prob must be in [0, 1]")
        self.capacity = capacity
        self.reinit_prob = reinit_prob
        self.sanity_bound = sanity_bound
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._store: list[np.ndarray] = []

    def __len__(self):
        return len(self._store)

    def sample_at(self, index: int) -> np.ndarray:
        return self._store[index]


def buffer_draw(buffer: ReplayBuffer, batch_size: int,
                init_bounds: tuple, shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Starting points for a batch of chains.

    Returns (x0, indices): indices[i] is the buffer slot the i-th sample
    was cached in, or -1 for a fresh uniform draw. An empty buffer
    yields all-fresh samples.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    lo, hi = init_bounds
    x0 = np.empty((batch_size,) + tuple(shape))
    indices = np.full(batch_size, -1, dtype=np.int64)
    fresh = buffer.rng.uniform(lo, hi, size=x0.shape)
    for i in range(batch_size):
        use_cache = len(buffer) > 0 and buffer.rng.uniform() >= buffer.reinit_prob
        if use_cache:
            j = int(buffer.rng.integers(0, len(buffer)))
            x0[i] = buffer.sample_at(j)
            indices[i] = j
        else:
            x0[i] = fresh[i]
    return x0, indices


def buffer_push(buffer: ReplayBuffer, samples: np.ndarray,
                indices: np.ndarray) -> ReplayBuffer:
    """Write chain endpoints back: cached slots are replaced in place,
    fresh samples append with FIFO eviction. Rows failing the sanity
    check (non-finite or out of bound) are dropped."""
    samples = np.asarray(samples, dtype=np.float64)
    for row, idx in zip(samples, np.asarray(indices, dtype=np.int64)):
        if not np.all(np.isfinite(row)):
            continue
        if buffer.sanity_bound is not None and np.abs(row).max() > buffer.sanity_bound:
            continue
        if 0 <= idx < len(buffer._store):
            buffer._store[idx] = row.copy()
        else:
            buffer._store.append(row.copy())
            if len(buffer._store) > buffer.capacity:
                buffer._store.pop(0)
    return buffer


def _check_rows(x: np.ndarray, bound: float) -> tuple[np.ndarray, np.ndarray, Optional[str]]:
    flat = x.reshape(x.shape[0], -1)
    finite = np.all(np.isfinite(flat), axis=1)
    magnitude = np.where(finite, np.abs(np.where(np.isfinite(flat), flat, 0.0)).max(axis=1), np.inf)
    bad_nonfinite = ~finite
    bad_bound = finite & (magnitude > bound)
    if bad_nonfinite.any():
        return bad_nonfinite | bad_bound, magnitude, "non-finite"
    if bad_bound.any():
        return bad_bound, magnitude, "bound-exceeded"
    return np.zeros(x.shape[0], dtype=bool), magnitude, None


def sgld_chain(model, params, x0: np.ndarray, config: SgldConfig,
               rng: Union[np.random.Generator, int] = 0,
               _trace_egm: bool = False) -> ChainResult:
    """Run a batch of chains for config.n_steps updates.

    Model parameters are read-only throughout. Chains that produce a
    non-finite coordinate or leave the divergence bound are frozen at
    their last finite state and flagged in the report; healthy chains
    keep running.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.array(x0, dtype=np.float64, copy=True)
    report = DivergenceReport(diverged_mask=np.zeros(x.shape[0], dtype=bool))
    trace: list[float] = []
    alive = np.ones(x.shape[0], dtype=bool)
    for i in range(config.n_steps):
        step = config.step_at(i)
        grads = en.energy_grad_input(model, params, x)
        if _trace_egm:
            trace.append(float(np.linalg.norm(
                grads.reshape(grads.shape[0], -1), axis=1).mean()))
        update = -(step / 2.0) * grads
        if config.noise:
            std = np.sqrt(step) if config.noise_scale is None else config.noise_scale
            update = update + rng.normal(0.0, std, size=x.shape)
        proposal = np.where(alive.reshape((-1,) + (1,) * (x.ndim - 1)), x + update, x)
        bad, magnitude, reason = _check_rows(proposal, config.bound)
        newly_bad = bad & alive
        if newly_bad.any():
            if not report.diverged:
                report.diverged = True
                report.step = i
                report.reason = reason
                worst = magnitude[newly_bad]
                report.magnitude = float(worst[np.isfinite(worst)].max()) \
                    if np.isfinite(worst).any() else float("inf")
            report.diverged_mask |= newly_bad
            alive &= ~newly_bad
            # frozen chains keep their last finite state
            proposal = np.where(newly_bad.reshape((-1,) + (1,) * (x.ndim - 1)), x, proposal)
        x = proposal
    result = ChainResult(samples=x, report=report)
    if _trace_egm:
        result.egm_trace = trace
        result.converged = bool(trace and trace[-1] < config.convergence_eta)
    return result


def sgld_chain_deterministic(model, params, x0: np.ndarray,
                             config: SgldConfig) -> ChainResult:
    """Noise-free descent on the energy, with a per-step trace of the
    mean energy-gradient magnitude; converged when the final trace value
    drops below config.convergence_eta."""
    quiet = SgldConfig(n_steps=config.n_steps, step_size=config.step_size,
                       decay_exponent=config.decay_exponent,
                       init_lo=config.init_lo, init_hi=config.init_hi,
                       noise=False, noise_scale=None,
                       divergence_bound=config.divergence_bound,
                       convergence_eta=config.convergence_eta)
    return sgld_chain(model, params, x0, quiet, rng=0, _trace_egm=True)


# ---------------------------------------------------------------------------
# analytic test energies (K = 1 logit models usable anywhere a ModelSpec is)

class QuadraticBowlEnergy:
    """Single-logit model f(x) = -0.5 * ||x||^2, so E(x) = 0.5 * ||x||^2.

    A noise-free chain contracts toward the origin for 0 < step < 4.
    """

    def __call__(self, params, x: ad.Tensor) -> ad.Tensor:
        sq = ad.mul(ad.sum_(ad.square(x), axis=tuple(range(1, x.ndim)), keepdims=False), 0.5)
        return ad.reshape(ad.neg(sq), (x.shape[0], 1))


class ConcaveBowlEnergy:
    """Single-logit model f(x) = +0.5 * ||x||^2, so E(x) = -0.5 * ||x||^2.

    Noise-free chains grow by (1 + step/2) per update: the documented
    unbounded-growth failure, used to exercise divergence reporting.
    """

    def __call__(self, params, x: ad.Tensor) -> ad.Tensor:
        sq = ad.mul(ad.sum_(ad.square(x), axis=tuple(range(1, x.ndim)), keepdims=False), 0.5)
        return ad.reshape(sq, (x.shape[0], 1))
