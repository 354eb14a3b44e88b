"""Desk-scale optimization benchmarks: polynomial programming, mean-field
variational inference for a Gaussian mixture, and Sudoku completion."""

from .adam import AdamState, adam_step
from .polyprog import PolyProgProblem, exact_polyprog_loss, polyprog_loss
from .gmm import GmmProblem, clustering_accuracy, gmm_generate, gmm_objective
from .sudoku import SudokuProblem, generate_puzzles, parse_puzzles, sudoku_penalty
from .runner import run_benchmark, write_summary_json, write_trace_csv

__all__ = [
    "AdamState",
    "adam_step",
    "PolyProgProblem",
    "polyprog_loss",
    "exact_polyprog_loss",
    "GmmProblem",
    "gmm_generate",
    "gmm_objective",
    "clustering_accuracy",
    "SudokuProblem",
    "generate_puzzles",
    "parse_puzzles",
    "sudoku_penalty",
    "run_benchmark",
    "write_trace_csv",
    "write_summary_json",
]
