"""Vanishing-gradient analysis and bias/variance measurement.

The decay study tracks, along a sweep of the earliest positive timestep t1,
the operator norm of the full parameter Jacobian of the relaxed sampling map
together with the margin (largest minus second-largest coordinate) of the
state entering the final transition.  Off the decision boundary the norm is
bounded by

    2K(K-1) * (1 + c_{t1} * M) * exp(-margin * c_{t1} / 2),

where c_t = alpha_t / sigma_t^2 and M bounds the Jacobian of the chain up to
t1 (estimated here as the max observed over the sweep).  The log-norm slope
against c_{t1} is therefore eventually at most -margin/2.

Bias/variance reports compare estimator replications against the exact
enumeration gradient; the decomposition MSE = |bias|^2 + trace(cov) holds
exactly as computed because the same replications feed both terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .categorical import FactorizedCategorical, exact_gradient, gumbel_noise
from .diffusion import linear_schedule, sample_trajectory, uniform_grid, TrajectoryNoise
from .estimators import EstimatorConfig, covariance_apply, estimate
from .tensor import Node, Tape, as_matrix, jacobian

_TIE_TOL = 1e-12


@dataclass(frozen=True)
class MarginReport:
    """Argmax index, gap to the runner-up, and whether the point is on a tie."""

    argmax_index: int
    margin: float
    on_boundary: bool


def margin(x, tol: float = _TIE_TOL) -> MarginReport:
    """Gap between the largest and second-largest coordinates of a row."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("margin needs at least two coordinates")
    order = np.argsort(x)
    top, second = x[order[-1]], x[order[-2]]
    m = float(top - second)
    return MarginReport(argmax_index=int(order[-1]), margin=m, on_boundary=m <= tol)


def operator_norm(mat, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Spectral norm via power iteration on A^T A.

    The start vector is a fixed ramp, deterministic and never orthogonal to
    the top singular direction of the covariance-like matrices used here
    (whose kernel contains the all-ones vector).
    """
    a = np.asarray(mat, dtype=np.float64)
    if a.size == 0 or not np.any(a):
        return 0.0
    v = np.arange(1.0, a.shape[1] + 1.0)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = a.T @ (a @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        new_sigma = float(np.linalg.norm(a @ v))
        if abs(new_sigma - sigma) <= tol * max(1.0, new_sigma):
            return new_sigma
        sigma = new_sigma
    return sigma


def coef_for_t(t: float) -> float:
    """c_t = (1 - t) / t^2 under the linear schedule."""
    return (1.0 - t) / (t * t)


def t_for_coef(c: float) -> float:
    """Inverse of :func:`coef_for_t`: the t in (0, 1) with (1-t)/t^2 = c."""
    if c <= 0.0:
        raise ValueError("c must be positive")
    return (-1.0 + np.sqrt(1.0 + 4.0 * c)) / (2.0 * c)


@dataclass(frozen=True)
class DecayPoint:
    t1: float
    c: float
    jac_norm: float
    margin: float
    bound: float
    on_boundary: bool


@dataclass
class DecayStudy:
    """Sweep results plus the fitted asymptotic slope of log |J| vs c_{t1}."""

    points: list
    chain_bound: float       # max over the sweep of |d/dtheta (state at t1)|
    slope: Optional[float]   # least squares on the last third, prefactor removed
    limit_margin: float      # margin at the smallest t1 in the sweep

    def csv_rows(self):
        header = ["t1", "c_t1", "jac_norm", "margin", "bound_value"]
        rows = [
            [p.t1, p.c, p.jac_norm, p.margin, p.bound]
            for p in self.points
        ]
        return header, rows


def jacobian_decay_study(logits, t1_list: Sequence[float], n: int = 4,
                         x1=None, noise_seed: int = 0) -> DecayStudy:
    """Measure Jacobian-norm decay as the earliest timestep shrinks.

    The timesteps above t1 stay fixed (the base uniform grid); only the
    earliest positive step moves.  Noise is frozen across the sweep.  Points
    whose pre-final state lands on the decision boundary are flagged and
    excluded from the slope fit.
    """
    logits = as_matrix(logits)
    if logits.shape[0] != 1:
        raise ValueError("the decay study analyzes a single categorical row")
    categories = logits.shape[1]
    base = uniform_grid(n)
    t2 = base[-3] if n > 2 else 1.0
    t1_list = [float(t) for t in t1_list]
    if any(not 0.0 < t < t2 for t in t1_list):
        raise ValueError(f"every t1 must lie in (0, {t2})")
    if x1 is None:
        x1 = np.random.default_rng(noise_seed).standard_normal((1, categories))
    x1 = as_matrix(x1)

    raw = []
    chain_bound = 0.0
    for t1 in t1_list:
        grid = base.copy()
        grid[-2] = t1
        schedule = linear_schedule(grid=grid)
        tape = Tape()
        leaf = tape.lift(logits, requires_grad=True)
        traj = sample_trajectory(leaf, schedule, TrajectoryNoise(x1=x1, step_z=(None,) * (n - 1)))
        jac_full = jacobian(traj.soft_sample, leaf)
        pre = traj.state_before_last
        jac_pre = jacobian(pre, leaf)
        rep = margin(pre.value[0])
        raw.append((t1, coef_for_t(t1), operator_norm(jac_full), rep))
        chain_bound = max(chain_bound, operator_norm(jac_pre))

    mk = 2.0 * categories * (categories - 1)
    points = [
        DecayPoint(
            t1=t1,
            c=c,
            jac_norm=norm,
            margin=rep.margin,
            bound=mk * (1.0 + c * chain_bound) * np.exp(-rep.margin * c / 2.0),
            on_boundary=rep.on_boundary,
        )
        for t1, c, norm, rep in raw
    ]
    slope = fit_decay_slope(points, chain_bound)
    by_t1 = min(points, key=lambda p: p.t1)
    return DecayStudy(points=points, chain_bound=chain_bound, slope=slope,
                      limit_margin=by_t1.margin)


def fit_decay_slope(points, chain_bound: float) -> Optional[float]:
    """Least-squares slope of log(|J| / (1 + c M)) vs c over the last third.

    Uses only points off the boundary with a nonzero norm; returns None when
    fewer than two remain.
    """
    usable = sorted(
        (p for p in points if not p.on_boundary and p.jac_norm > 0.0),
        key=lambda p: p.c,
    )
    if len(usable) < 2:
        return None
    tail = usable[max(len(usable) - max(2, len(usable) // 3), 0):]
    cs = np.array([p.c for p in tail])
    ys = np.array([np.log(p.jac_norm / (1.0 + p.c * chain_bound)) for p in tail])
    slope, _ = np.polyfit(cs, ys, 1)
    return float(slope)


def decay_sweep_coefs(limit_margin: float, categories: int, points: int = 12,
                      target_norm: float = 1e-6, c_min: float = 1.0,
                      safety: float = 1.6) -> np.ndarray:
    """Log-spaced c values covering the knee and the bound-implied threshold.

    The threshold is where 2K(K-1) exp(-m c / 2) crosses ``target_norm``; the
    safety factor absorbs the drift of the margin as t1 shrinks (the probe
    margin is measured at a moderate t1, the limit margin is smaller).
    """
    mk = 2.0 * categories * (categories - 1)
    c_star = 2.0 * np.log(mk / target_norm) / limit_margin
    return np.geomspace(c_min, safety * c_star, points)


def default_decay_study(logits, x1, n: int = 4, points: int = 12,
                        max_rounds: int = 4) -> DecayStudy:
    """Probe the margin at a moderate t1, then sweep past the bound threshold.

    The margin of the pre-final state drifts downward as t1 shrinks, so the
    sweep is re-sized from the measured limit margin until it actually covers
    the bound-implied threshold (or the rounds run out, for trajectories that
    approach the decision boundary).
    """
    logits = as_matrix(logits)
    categories = logits.shape[1]
    probe = jacobian_decay_study(logits, [t_for_coef(60.0)], n=n, x1=x1)
    if probe.points[0].on_boundary or probe.limit_margin <= 0.0:
        raise ValueError("probe trajectory lands on the decision boundary")
    margin_guess = probe.limit_margin
    study = None
    for _ in range(max_rounds):
        cs = decay_sweep_coefs(margin_guess, categories, points=points)
        study = jacobian_decay_study(logits, [t_for_coef(c) for c in cs], n=n, x1=x1)
        c_star = bound_threshold(study.limit_margin, categories)
        if any(p.c >= c_star for p in study.points):
            break
        margin_guess = study.limit_margin
    return study


def bound_threshold(limit_margin: float, categories: int, target_norm: float = 1e-6) -> float:
    mk = 2.0 * categories * (categories - 1)
    return 2.0 * np.log(mk / target_norm) / limit_margin


# ---------------------------------------------------------------------------
# Polynomial test objectives
# ---------------------------------------------------------------------------


class PolyObjective:
    """Polynomial objective with tape, plain, and batched evaluation paths.

    f(x) = <lin, x> + vec(x)^T quad vec(x) + <cubic, x**3> + const, with any
    of the coefficient blocks optional.  The batched paths evaluate a whole
    (R, L, K) stack at once, which keeps large-replication bias/variance
    measurements cheap for the single-shot estimators.
    """

    def __init__(self, shape, lin=None, quad=None, cubic=None, const: float = 0.0):
        self.shape = tuple(shape)
        size = self.shape[0] * self.shape[1]
        self.lin = None if lin is None else as_matrix(lin)
        self.quad = None if quad is None else np.asarray(quad, dtype=np.float64)
        if self.quad is not None and self.quad.shape != (size, size):
            raise ValueError("quadratic block must be (L*K, L*K)")
        self.cubic = None if cubic is None else as_matrix(cubic)
        self.const = float(const)

    def __call__(self, x: Node) -> Node:
        terms = []
        if self.lin is not None:
            terms.append(x.dot(self.lin))
        if self.quad is not None:
            flat = x.reshape(self.quad.shape[0], 1)
            terms.append(flat.dot(self.quad @ flat))
        if self.cubic is not None:
            terms.append(x.pow(3.0).dot(self.cubic))
        if not terms:
            return x.tape.constant([[self.const]])
        out = terms[0]
        for term in terms[1:]:
            out = out + term
        return out + self.const if self.const else out

    def value(self, x) -> float:
        x = as_matrix(x)
        out = self.const
        if self.lin is not None:
            out += float((self.lin * x).sum())
        if self.quad is not None:
            flat = x.ravel()
            out += float(flat @ self.quad @ flat)
        if self.cubic is not None:
            out += float((self.cubic * x**3).sum())
        return out

    def grad(self, x) -> np.ndarray:
        x = as_matrix(x)
        g = np.zeros(self.shape)
        if self.lin is not None:
            g += self.lin
        if self.quad is not None:
            g += ((self.quad + self.quad.T) @ x.ravel()).reshape(self.shape)
        if self.cubic is not None:
            g += 3.0 * self.cubic * x**2
        return g

    def value_batch(self, stack: np.ndarray) -> np.ndarray:
        out = np.full(stack.shape[0], self.const)
        if self.lin is not None:
            out += np.einsum("rlk,lk->r", stack, self.lin)
        if self.quad is not None:
            flat = stack.reshape(stack.shape[0], -1)
            out += np.einsum("ri,ij,rj->r", flat, self.quad, flat)
        if self.cubic is not None:
            out += np.einsum("rlk,lk->r", stack**3, self.cubic)
        return out

    def grad_batch(self, stack: np.ndarray) -> np.ndarray:
        g = np.zeros_like(stack)
        if self.lin is not None:
            g += self.lin
        if self.quad is not None:
            flat = stack.reshape(stack.shape[0], -1)
            g += (flat @ (self.quad + self.quad.T)).reshape(stack.shape)
        if self.cubic is not None:
            g += 3.0 * self.cubic * stack**2
        return g


def random_linear(rng: np.random.Generator, length: int, categories: int) -> PolyObjective:
    return PolyObjective((length, categories), lin=rng.uniform(-1, 1, (length, categories)))


def random_quadratic(rng: np.random.Generator, length: int, categories: int) -> PolyObjective:
    size = length * categories
    a = rng.uniform(-1, 1, (size, size))
    return PolyObjective(
        (length, categories),
        lin=rng.uniform(-1, 1, (length, categories)),
        quad=0.5 * (a + a.T),
    )


def random_cubic(rng: np.random.Generator, length: int, categories: int) -> PolyObjective:
    size = length * categories
    a = rng.uniform(-1, 1, (size, size))
    return PolyObjective(
        (length, categories),
        lin=rng.uniform(-1, 1, (length, categories)),
        quad=0.5 * (a + a.T),
        cubic=rng.uniform(-1, 1, (length, categories)),
    )


# ---------------------------------------------------------------------------
# Bias / variance against the enumeration oracle
# ---------------------------------------------------------------------------


@dataclass
class BiasVarianceReport:
    kind: str
    replications: int
    mean_grad: np.ndarray
    exact_grad: np.ndarray
    bias_norm: float
    trace_cov: float
    mse: float


_BATCHABLE_KINDS = frozenset({"st", "reinmax", "reinforce"})


def bias_variance(config: EstimatorConfig, dist: FactorizedCategorical, f,
                  replications: int, rng) -> BiasVarianceReport:
    """Replicate an estimator and compare its mean against the exact gradient.

    Covariance is normalized by R so that MSE = |bias|^2 + trace(cov) holds
    exactly for the same replications.
    """
    exact = exact_gradient(dist, f)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if config.kind in _BATCHABLE_KINDS and hasattr(f, "grad_batch"):
        grads = _batched_single_shot(config, dist, f, replications, rng)
    else:
        grads = np.empty((replications,) + dist.logits.shape)
        for r in range(replications):
            grads[r] = estimate(dist, f, config, rng).grad
    mean_grad = grads.mean(axis=0)
    bias = mean_grad - exact
    trace_cov = float(((grads - mean_grad) ** 2).sum() / replications)
    mse = float(((grads - exact) ** 2).sum() / replications)
    return BiasVarianceReport(
        kind=config.kind,
        replications=replications,
        mean_grad=mean_grad,
        exact_grad=exact,
        bias_norm=float(np.linalg.norm(bias)),
        trace_cov=trace_cov,
        mse=mse,
    )


def _batched_single_shot(config, dist, f, replications, rng):
    """Vectorized replications for the single-draw estimators."""
    p = dist.probs
    g = gumbel_noise((replications,) + p.shape, rng)
    indices = np.argmax(dist.logits[None] + g, axis=2)
    onehots = np.zeros_like(g)
    rows = np.arange(dist.length)
    for r in range(replications):
        onehots[r, rows, indices[r]] = 1.0
    if config.kind == "reinforce":
        values = f.value_batch(onehots)
        b = 0.0 if config.baseline is None else config.baseline
        return (values - b)[:, None, None] * (onehots - p[None])
    gx = f.grad_batch(onehots)
    cov_term = p[None] * (gx - (p[None] * gx).sum(axis=2, keepdims=True))
    if config.kind == "st":
        return cov_term
    d = onehots - p[None]
    return 0.5 * (cov_term + d * (d * gx).sum(axis=2, keepdims=True))


# ---------------------------------------------------------------------------
# Transport-map slices (binary case)
# ---------------------------------------------------------------------------


def transport_slice(theta_values: Sequence[float], quantiles: Sequence[float],
                    t1_list: Sequence[float], n: int = 4):
    """First coordinate of the relaxed sample as a function of the target weight.

    For K=2 the trajectory depends on the terminal noise only through the
    coordinate gap, so a scalar quantile q pins the slice
    x1(q) = ndtri(q) * (e1 - e2) / sqrt(2).  Returns rows
    (t1, q, theta, output) showing the map sharpen as t1 shrinks.
    """
    base = uniform_grid(n)
    t2 = base[-3] if n > 2 else 1.0
    rows = []
    for t1 in t1_list:
        if not 0.0 < t1 < t2:
            raise ValueError(f"t1 must lie in (0, {t2})")
        grid = base.copy()
        grid[-2] = t1
        schedule = linear_schedule(grid=grid)
        for q in quantiles:
            u = float(ndtri(q))
            x1 = (u / np.sqrt(2.0)) * np.array([[1.0, -1.0]])
            for theta in theta_values:
                if not 0.0 < theta < 1.0:
                    raise ValueError("theta weights must lie in (0, 1)")
                tape = Tape()
                leaf = tape.lift(np.log([[theta, 1.0 - theta]]))
                traj = sample_trajectory(
                    leaf, schedule, TrajectoryNoise(x1=x1, step_z=(None,) * (n - 1)))
                rows.append((t1, q, theta, float(traj.soft_sample.value[0, 0])))
    return rows
