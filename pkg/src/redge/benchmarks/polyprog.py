"""Polynomial programming: push L binary choices toward a fixed target.

Each row is a 2-way categorical; the discrete loss per row is |x2 - c|^p with
x2 the second one-hot coordinate.  Since the row values at the two vertices
are c^p and (1-c)^p, the optimum is c^p with all mass on the first category.

Besides the power relaxation, a linear extension matching the loss at every
vertex is provided:  c^p * x1 + (1-c)^p * x2.  It defines the same discrete
problem but a much easier optimization landscape for straight-through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Node, as_matrix

RELAXATIONS = ("power", "linear")


@dataclass(frozen=True)
class PolyProgProblem:
    length: int = 128
    target: float = 0.45
    exponent: float = 2.0
    relaxation: str = "power"

    def __post_init__(self):
        if self.exponent < 1.0:
            raise ValueError("exponent must be >= 1")
        if not 0.0 < self.target < 1.0:
            raise ValueError("target must lie in (0, 1)")
        if self.relaxation not in RELAXATIONS:
            raise ValueError(f"relaxation must be one of {RELAXATIONS}")

    def vertex_values(self):
        """Per-row loss at the two vertices (category 1, category 2)."""
        return self.target**self.exponent, (1.0 - self.target) ** self.exponent

    @property
    def optimum(self) -> float:
        return min(self.vertex_values())


def polyprog_loss(x: Node, problem: PolyProgProblem) -> Node:
    """Mean per-row loss of an Lx2 (soft or hard) sample."""
    rows = x.shape[0]
    if problem.relaxation == "power":
        col2 = x @ np.array([[0.0], [1.0]])
        per_row = (col2 - problem.target).abs().pow(problem.exponent)
    else:
        v1, v2 = problem.vertex_values()
        per_row = x @ np.array([[v1], [v2]])
    return per_row.sum() * (1.0 / rows)


def exact_polyprog_loss(probs, problem: PolyProgProblem) -> float:
    """Exact expectation of the discrete loss via two-point enumeration per row."""
    probs = as_matrix(probs)
    v1, v2 = problem.vertex_values()
    return float((probs[:, 0] * v1 + probs[:, 1] * v2).mean())
