"""Interpolation schedules, closed-form denoisers, and DDIM transitions.

The forward path interpolates x_t = alpha_t * x0 + sigma_t * x1 between a
factorized categorical target at t=0 and a Gaussian reference at t=1.  For
one-hot targets the posterior-mean denoiser has a closed form,

    denoise(x, t) = softmax(logits + c_t * x),        c_t = alpha_t / sigma_t^2,

so reverse transitions need no learned model.  Deterministic transitions
follow

    T_{s|t}(x) = (alpha_s - alpha_t * sigma_s / sigma_t) * denoise(x, t)
                 + (sigma_s / sigma_t) * x,

and the stochastic variant re-injects eta_s-scaled Gaussian noise.  A
moment-matched diagonal Gaussian reference (mean/variance of the target per
coordinate) replaces the standard normal for the covariance-corrected
estimator; its denoiser gains a per-coordinate precision weighting.

Everything here is built from tape nodes, so trajectories are differentiable
with respect to the logits (and, when enabled, the reference moments).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .categorical import FactorizedCategorical
from .tensor import Node, Tape, as_matrix, softmax_rows, stable_softmax

# Floor for per-coordinate variances of the moment-matched reference; keeps
# the precision weights finite on degenerate rows.
VAR_FLOOR = 1e-6


def path_variance_floor(categories: int) -> float:
    """Variance floor used when the moment-matched reference drives a
    differentiable sampling path.

    Sharpening rows send per-coordinate variances p(1-p) toward zero and the
    precision weights 1/v toward 1/VAR_FLOOR, which saturates every softmax
    along the path and collapses its gradients (a runaway feedback: sharper
    probabilities -> larger weights -> sharper states).  Flooring just below
    the uniform-distribution coordinate variance caps the weights near the
    category count while leaving the informative (high-probability)
    coordinates untouched; the factor keeps exactly-uniform rows strictly off
    the clamp so the path stays smooth there.
    """
    uniform_var = (1.0 / categories) * (1.0 - 1.0 / categories)
    return max(VAR_FLOOR, 0.9 * uniform_var)

_BOUNDARY_TOL = 1e-12


@dataclass(frozen=True)
class Schedule:
    """Interpolation coefficients (alpha, sigma), per-step noise eta, and a grid.

    The grid is a strictly decreasing array of timesteps from 1.0 down to 0.0.
    Boundary conditions alpha(0)=1, sigma(0)=0, alpha(1)=0, sigma(1)=1 are
    enforced, along with monotonicity along the grid and 0 <= eta <= sigma.
    """

    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    eta: Callable[[float], float]
    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must be a 1-D array with at least two timesteps")
        if abs(grid[0] - 1.0) > _BOUNDARY_TOL or abs(grid[-1]) > _BOUNDARY_TOL:
            raise ValueError("grid must run from 1.0 down to 0.0")
        if np.any(np.diff(grid) >= 0.0):
            raise ValueError("grid must be strictly decreasing")
        for value, target in ((self.alpha(0.0), 1.0), (self.sigma(0.0), 0.0),
                              (self.alpha(1.0), 0.0), (self.sigma(1.0), 1.0)):
            if abs(value - target) > _BOUNDARY_TOL:
                raise ValueError("schedule violates boundary conditions")
        ts = grid[::-1]
        alphas = np.array([self.alpha(t) for t in ts])
        sigmas = np.array([self.sigma(t) for t in ts])
        if np.any(np.diff(alphas) > _BOUNDARY_TOL) or np.any(np.diff(sigmas) < -_BOUNDARY_TOL):
            raise ValueError("alpha must be non-increasing and sigma non-decreasing in t")
        for t in ts:
            e = self.eta(t)
            if e < -_BOUNDARY_TOL or e > self.sigma(t) + _BOUNDARY_TOL:
                raise ValueError("eta must satisfy 0 <= eta_t <= sigma_t on the grid")

    def coef_ratio(self, t: float) -> float:
        """c_t = alpha_t / sigma_t^2; undefined at t=0 where sigma vanishes."""
        s = self.sigma(t)
        if s <= 0.0:
            raise ValueError(f"c_t undefined at t={t}: sigma is zero")
        return self.alpha(t) / (s * s)

    @property
    def t1(self) -> float:
        """Earliest positive timestep (the one that controls gradient decay)."""
        return float(self.grid[-2])


def uniform_grid(n: int, t1: Optional[float] = None) -> np.ndarray:
    """Decreasing grid of n timesteps, t_k = k/(n-1).

    With a ``t1`` override the earliest positive step is pinned to ``t1`` and
    the remaining positive steps are spread uniformly between t1 and 1.
    """
    if n < 2:
        raise ValueError("need at least two timesteps")
    if t1 is None:
        return np.linspace(1.0, 0.0, n)
    if not 0.0 < t1 <= 1.0:
        raise ValueError("t1 must lie in (0, 1]")
    if n == 2:
        if abs(t1 - 1.0) > _BOUNDARY_TOL:
            raise ValueError("with n=2 the only positive timestep is 1.0")
        return np.array([1.0, 0.0])
    return np.concatenate([np.linspace(1.0, t1, n - 1), [0.0]])


def linear_schedule(n: int = 2, t1: Optional[float] = None,
                    eta: Union[str, Callable[[float], float]] = "zero",
                    grid: Optional[np.ndarray] = None) -> Schedule:
    """Linear interpolation schedule alpha_t = 1 - t, sigma_t = t.

    ``eta`` selects the per-step stochasticity: "zero" for the deterministic
    sampler, "half" for eta_t = sigma_t / 2, "full" for eta_t = sigma_t, or
    any callable.
    """
    alpha = lambda t: 1.0 - t
    sigma = lambda t: float(t)
    if eta == "zero":
        eta_fn = lambda t: 0.0
    elif eta == "half":
        eta_fn = lambda t: 0.5 * float(t)
    elif eta == "full":
        eta_fn = sigma
    elif callable(eta):
        eta_fn = eta
    else:
        raise ValueError(f"unknown eta schedule {eta!r}")
    if grid is None:
        grid = uniform_grid(n, t1)
    return Schedule(alpha=alpha, sigma=sigma, eta=eta_fn, grid=np.asarray(grid, dtype=np.float64))


@dataclass(frozen=True)
class GaussianBase:
    """Diagonal Gaussian reference: per-coordinate means, variances, precisions."""

    mu: np.ndarray
    v: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_moments(cls, mu, v, floor: float = VAR_FLOOR) -> "GaussianBase":
        mu = as_matrix(mu).copy()
        v = np.maximum(as_matrix(v), floor)
        return cls(mu=mu, v=v, lam=1.0 / v)


def mle_base(dist: FactorizedCategorical, floor: float = VAR_FLOOR) -> GaussianBase:
    """Moment-matched diagonal Gaussian: mu = p, v = p*(1-p) (floored).

    This is the maximum-likelihood diagonal Gaussian fit to the one-hot
    target, coordinate by coordinate.
    """
    p = dist.probs
    return GaussianBase.from_moments(p, p * (1.0 - p), floor=floor)


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def denoiser(logits: Node, x, t: float, schedule: Schedule) -> Node:
    """Posterior-mean denoiser softmax(logits + c_t * x); row-stochastic."""
    c = schedule.coef_ratio(t)
    x = _as_node(logits.tape, x)
    return softmax_rows(logits + x * c)


def denoiser_cov(logits: Node, x, t: float, schedule: Schedule, mu, v) -> Node:
    """Denoiser under the diagonal Gaussian reference N(mu, diag(v)).

    softmax(logits + (alpha_t/sigma_t^2) * lam * (x - sigma_t*mu - alpha_t/2)),
    with lam = 1/v elementwise.  For row-constant lam the alpha_t/2 shift is a
    per-row constant and cancels inside the softmax.
    """
    tape = logits.tape
    c = schedule.coef_ratio(t)
    a_t, s_t = schedule.alpha(t), schedule.sigma(t)
    x = _as_node(tape, x)
    mu = _as_node(tape, mu)
    v = _as_node(tape, v)
    lam = v.pow(-1.0)
    shift = x - mu * s_t - (a_t / 2.0)
    return softmax_rows(logits + lam * shift * c)


def denoiser_jacobians(logits, x, t: float, schedule: Schedule):
    """Closed-form per-row Jacobians of the denoiser.

    Returns (S, c_t * S) where S[i] = diag(d_i) - d_i d_i^T with d the
    denoiser output: the Jacobian blocks with respect to the logits and to x.
    """
    c = schedule.coef_ratio(t)
    logits = as_matrix(logits)
    x = as_matrix(x)
    d = stable_softmax(logits + c * x)
    sig = -d[:, :, None] * d[:, None, :]
    rows, cols = np.arange(d.shape[1]), np.arange(d.shape[1])
    sig[:, rows, cols] += d
    return sig, c * sig


def ddim_step(s: float, t: float, x_t: Node, d: Node, schedule: Schedule) -> Node:
    """Deterministic reverse transition from time t down to s."""
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    sig_t = schedule.sigma(t)
    if sig_t <= 0.0:
        raise ValueError("transition undefined: sigma_t is zero")
    a = schedule.alpha(s) - schedule.alpha(t) * schedule.sigma(s) / sig_t
    b = schedule.sigma(s) / sig_t
    return d * a + x_t * b


def ddim_stochastic_step(s: float, t: float, x_t: Node, d: Node,
                         schedule: Schedule, z: np.ndarray) -> Node:
    """Stochastic reverse transition: renoise with eta_s-scaled Gaussian z.

    Recovers the deterministic step exactly when eta_s = 0.
    """
    eta_s = schedule.eta(s)
    sig_s = schedule.sigma(s)
    if eta_s > sig_s + _BOUNDARY_TOL:
        raise ValueError("eta_s exceeds sigma_s")
    if eta_s <= 0.0:
        return ddim_step(s, t, x_t, d, schedule)
    if not 0.0 < s < t <= 1.0:
        raise ValueError(f"need 0 < s < t <= 1 for a stochastic step, got s={s}, t={t}")
    a_t, sig_t = schedule.alpha(t), schedule.sigma(t)
    x1_hat = (x_t - d * a_t) * (1.0 / sig_t)
    drift = d * schedule.alpha(s) + x1_hat * float(np.sqrt(max(sig_s**2 - eta_s**2, 0.0)))
    return drift + x_t.tape.constant(eta_s * as_matrix(z))


@dataclass(frozen=True)
class TrajectoryNoise:
    """Frozen noise draws for one trajectory: the terminal draw plus per-step z.

    ``x1`` is the standard-normal draw; under a moment-matched reference it is
    transformed to mu + sqrt(v) * x1 inside the trajectory.  ``step_z`` holds
    one entry per transition, None where the step is deterministic.
    """

    x1: np.ndarray
    step_z: tuple = field(default_factory=tuple)


def draw_noise(schedule: Schedule, length: int, categories: int,
               rng: np.random.Generator) -> TrajectoryNoise:
    """Draw all randomness a trajectory needs, in a fixed order."""
    x1 = rng.standard_normal((length, categories))
    step_z = []
    for s in schedule.grid[1:]:
        if schedule.eta(s) > 0.0:
            step_z.append(rng.standard_normal((length, categories)))
        else:
            step_z.append(None)
    return TrajectoryNoise(x1=x1, step_z=tuple(step_z))


@dataclass
class Trajectory:
    """All intermediate states of one reverse pass, ordered by decreasing t."""

    states: list          # [(t, Node)] from t=1 down to t=0
    soft_sample: Node     # final state, a relaxed sample on the simplex
    final_denoiser: Node  # denoiser output at the earliest positive timestep

    @property
    def state_before_last(self) -> Node:
        return self.states[-2][1]


def sample_trajectory(logits: Node, schedule: Schedule, noise: TrajectoryNoise,
                      base=None, base_backprop: bool = True) -> Trajectory:
    """Run the reverse chain down the grid, recording every state.

    ``base`` selects the terminal reference: None for the standard normal,
    "mle" for the moment-matched diagonal Gaussian derived from the logits
    (differentiable when ``base_backprop``), or a fixed :class:`GaussianBase`.
    """
    tape = logits.tape
    if base is None:
        x = tape.constant(noise.x1)
    else:
        mu_node, v_node = _base_nodes(logits, base, base_backprop)
        x = mu_node + v_node.sqrt() * tape.constant(noise.x1)
    states = [(float(schedule.grid[0]), x)]
    d = None
    for k in range(len(schedule.grid) - 1):
        t, s = float(schedule.grid[k]), float(schedule.grid[k + 1])
        if base is None:
            d = denoiser(logits, x, t, schedule)
        else:
            d = denoiser_cov(logits, x, t, schedule, mu_node, v_node)
        if schedule.eta(s) > 0.0:
            x = ddim_stochastic_step(s, t, x, d, schedule, noise.step_z[k])
        else:
            x = ddim_step(s, t, x, d, schedule)
        states.append((s, x))
    return Trajectory(states=states, soft_sample=x, final_denoiser=d)


def _base_nodes(logits: Node, base, base_backprop: bool):
    tape = logits.tape
    if isinstance(base, GaussianBase):
        return tape.constant(base.mu), tape.constant(base.v)
    if base == "mle":
        p = softmax_rows(logits)
        ones = tape.constant(np.ones_like(p.value))
        v = (p * (ones - p)).clamp_min(path_variance_floor(logits.value.shape[1]))
        if not base_backprop:
            return p.detach(), v.detach()
        return p, v
    raise ValueError(f"unknown base {base!r}")
