"""Run harness: optimize each benchmark with a chosen estimator and record
reproducible traces.

Batched replications are realized by row-stacking: the factorized rows of
independent replications (or puzzles) are concatenated into one logit matrix,
one estimator call serves the whole batch, and the gradient is folded back by
summing replication tiles.  Estimator randomness is derived per step from
(seed, step), so a rerun with the same configuration is bit-identical;
traces deliberately contain no wall-clock columns.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..categorical import FactorizedCategorical, sample_onehot_rows
from ..estimators import EstimatorConfig, estimate
from .adam import AdamState, adam_step
from . import gmm as gmm_mod
from .polyprog import PolyProgProblem, exact_polyprog_loss, polyprog_loss
from .sudoku import DIGITS, SudokuBatch, penalty_batch, is_valid_grid

INIT_LOGIT_STD = 0.1


@dataclass
class RunResult:
    trace: list                      # rows (step, loss, grad_norm)
    summary: dict
    diverged: bool = False


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, step)))


def _init_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, tag)))


def format_float(x: float) -> str:
    """Shortest round-trip decimal form; '.' separator, platform independent."""
    return repr(float(x))


def write_trace_csv(path, trace) -> None:
    lines = ["step,loss,grad_norm"]
    for step, loss, grad_norm in trace:
        lines.append(f"{step},{format_float(loss)},{format_float(grad_norm)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_jsonify)
        fh.write("\n")


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _config_echo(est_cfg: EstimatorConfig, problem: str, steps: int, seed: int,
                 extra: dict) -> dict:
    echo = {"problem": problem, "steps": steps, "seed": seed,
            "estimator": asdict(est_cfg)}
    echo.update(extra)
    return echo


# ---------------------------------------------------------------------------
# Polynomial programming
# ---------------------------------------------------------------------------


def run_polyprog(problem: PolyProgProblem, est_cfg: EstimatorConfig, steps: int,
                 seed: int, batch: int = 256, lr: float = 0.05) -> RunResult:
    length = problem.length
    logits = INIT_LOGIT_STD * _init_rng(seed, 1).standard_normal((length, 2))
    stacked = PolyProgProblem(length=batch * length, target=problem.target,
                              exponent=problem.exponent, relaxation=problem.relaxation)
    adam = AdamState(lr=lr)
    trace = []
    diverged = False
    start = time.perf_counter()
    for step in range(steps):
        dist = FactorizedCategorical(np.tile(logits, (batch, 1)))
        est = estimate(dist, lambda x: polyprog_loss(x, stacked), est_cfg,
                       _step_rng(seed, step))
        grad = est.grad.reshape(batch, length, 2).sum(axis=0)
        loss = exact_polyprog_loss(FactorizedCategorical(logits).probs, problem)
        trace.append((step, loss, float(np.linalg.norm(grad))))
        if not np.all(np.isfinite(grad)):
            diverged = True
            break
        logits = adam_step(adam, logits, grad)
    final_probs = FactorizedCategorical(logits).probs
    final_loss = exact_polyprog_loss(final_probs, problem)
    summary = {
        "config": _config_echo(est_cfg, "poly", steps, seed,
                               {"batch": batch, "lr": lr,
                                "exponent": problem.exponent,
                                "relaxation": problem.relaxation,
                                "length": problem.length,
                                "target": problem.target}),
        "final_loss": final_loss,
        "optimum": problem.optimum,
        "gap_to_optimum": final_loss - problem.optimum,
        "diverged": diverged,
        "wall_seconds": time.perf_counter() - start,
    }
    return RunResult(trace=trace, summary=summary, diverged=diverged)


# ---------------------------------------------------------------------------
# GMM variational inference
# ---------------------------------------------------------------------------


def run_gmm(problem: gmm_mod.GmmProblem, est_cfg: EstimatorConfig, steps: int,
            seed: int, lr: float = 0.01, tail: int = 100) -> RunResult:
    init = _init_rng(seed, 2)
    logits = INIT_LOGIT_STD * init.standard_normal((problem.size, problem.components))
    mhat = problem.sigma0 * init.standard_normal((problem.components, problem.dim))
    adam_logits = AdamState(lr=lr)
    adam_mhat = AdamState(lr=lr)
    trace = []
    diverged = False
    start = time.perf_counter()
    for step in range(steps):
        dist = FactorizedCategorical(logits)
        mh = mhat

        def f(x, mh=mh):
            return gmm_mod.likelihood_term(x, mh, problem)

        est = estimate(dist, f, est_cfg, _step_rng(seed, step))
        g_logits = est.grad + gmm_mod.entropy_prior_gradient(logits, problem)
        g_mhat = est.aux_grads["mhat"] + gmm_mod.map_gradient(mhat, problem)
        nelbo = gmm_mod.exact_objective_value(logits, mhat, problem)
        trace.append((step, nelbo, float(np.linalg.norm(g_logits))))
        if not (np.all(np.isfinite(g_logits)) and np.all(np.isfinite(g_mhat))):
            diverged = True
            break
        logits = adam_step(adam_logits, logits, g_logits)
        mhat = adam_step(adam_mhat, mhat, g_mhat)
    tail_vals = [row[1] for row in trace[-tail:]]
    summary = {
        "config": _config_echo(est_cfg, "gmm", steps, seed,
                               {"lr": lr, "size": problem.size,
                                "components": problem.components,
                                "sigma0": problem.sigma0,
                                "sigma_y": problem.sigma_y}),
        "final_nelbo": trace[-1][1] if trace else float("nan"),
        "tail_nelbo_mean": float(np.mean(tail_vals)) if tail_vals else float("nan"),
        "tail_nelbo_std": float(np.std(tail_vals)) if tail_vals else float("nan"),
        "clustering_accuracy": gmm_mod.clustering_accuracy(logits, problem.true_z),
        "diverged": diverged,
        "wall_seconds": time.perf_counter() - start,
    }
    return RunResult(trace=trace, summary=summary, diverged=diverged)


# ---------------------------------------------------------------------------
# Sudoku
# ---------------------------------------------------------------------------


def run_sudoku(problems, est_cfg: EstimatorConfig, steps: int, seed: int,
               lr: float = 0.05, mc_draws: int = 16) -> RunResult:
    batch = SudokuBatch(problems)
    logits = INIT_LOGIT_STD * _init_rng(seed, 3).standard_normal((batch.total_free, DIGITS))
    adam = AdamState(lr=lr)
    trace = []
    diverged = False
    start = time.perf_counter()
    for step in range(steps):
        dist = FactorizedCategorical(logits)
        est = estimate(dist, batch.objective, est_cfg, _step_rng(seed, step))
        grad = est.grad
        loss = _mc_hard_loss(batch, logits, mc_draws, _step_rng(seed, steps + step)).mean()
        trace.append((step, float(loss), float(np.linalg.norm(grad))))
        if not np.all(np.isfinite(grad)):
            diverged = True
            break
        logits = adam_step(adam, logits, grad)
    per_puzzle_loss = _mc_hard_loss(batch, logits, mc_draws, _step_rng(seed, 2 * steps + 1))
    hard = batch.argmax_grids(logits)
    solved = np.array([is_valid_grid(hard[i]) for i in range(batch.count)])
    summary = {
        "config": _config_echo(est_cfg, "sudoku", steps, seed,
                               {"lr": lr, "puzzles": batch.count, "mc_draws": mc_draws}),
        "mean_loss": float(per_puzzle_loss.mean()),
        "std_loss": float(per_puzzle_loss.std()),
        "solved_percent": float(100.0 * solved.mean()),
        "solved_count": int(solved.sum()),
        "diverged": diverged,
        "wall_seconds": time.perf_counter() - start,
    }
    return RunResult(trace=trace, summary=summary, diverged=diverged)


def _mc_hard_loss(batch: SudokuBatch, logits: np.ndarray, draws: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo penalty over hard samples: per-puzzle average of `draws`."""
    tiled = np.tile(logits, (draws, 1))
    hard = sample_onehot_rows(tiled, rng).onehot.reshape(draws, batch.total_free, DIGITS)
    grids = batch.grids_from_free(hard)            # (draws, P, 81, 9)
    return penalty_batch(grids).mean(axis=0)       # (P,)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def run_benchmark(problem, est_cfg: EstimatorConfig, steps: int, seed: int,
                  **kwargs) -> RunResult:
    """Run one benchmark; ``problem`` selects the harness by type."""
    if isinstance(problem, PolyProgProblem):
        return run_polyprog(problem, est_cfg, steps, seed, **kwargs)
    if isinstance(problem, gmm_mod.GmmProblem):
        return run_gmm(problem, est_cfg, steps, seed, **kwargs)
    if isinstance(problem, (list, tuple)):
        return run_sudoku(problem, est_cfg, steps, seed, **kwargs)
    raise TypeError(f"unknown problem type {type(problem)!r}")
