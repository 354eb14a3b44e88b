"""Sudoku completion as penalized optimization over 81 cell categoricals.

A grid is an 81x9 matrix of per-cell digit distributions (or one-hots).  For
each of the 27 groups (9 rows, 9 columns, 9 blocks) the digit-count vector of
a valid completion is all ones, so the penalty

    sum_g  | sum_{i in g} x_i  -  1 |_2^2

is zero exactly on valid grids.  Clue cells are frozen one-hot constants and
never optimized; only the free cells carry logits.

Group sums and their adjoint are implemented with reshapes so that many
puzzles can be stacked into one (P*81)x9 matrix and optimized in a single
pass, which is what the batched benchmark runner does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Node, linear_op

GRID_CELLS = 81
DIGITS = 9


def _group_indices():
    rows = [list(range(9 * r, 9 * r + 9)) for r in range(9)]
    cols = [list(range(c, 81, 9)) for c in range(9)]
    blocks = []
    for br in range(3):
        for bc in range(3):
            blocks.append([9 * (3 * br + dr) + (3 * bc + dc)
                           for dr in range(3) for dc in range(3)])
    return rows + cols + blocks


GROUPS = _group_indices()


def group_sums(grids: np.ndarray) -> np.ndarray:
    """Digit counts per group: (..., 81, 9) -> (..., 27, 9).

    Order: 9 row groups, 9 column groups, 9 blocks.
    """
    lead = grids.shape[:-2]
    cells = grids.reshape(lead + (9, 9, 9))
    row_g = cells.sum(axis=-2)
    col_g = cells.sum(axis=-3)
    block_g = (grids.reshape(lead + (3, 3, 3, 3, 9))
               .sum(axis=(-4, -2))
               .reshape(lead + (9, 9)))
    return np.concatenate([row_g, col_g, block_g], axis=-2)


def group_sums_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`group_sums`: scatter group cotangents back to cells."""
    lead = g.shape[:-2]
    row_g, col_g, block_g = g[..., 0:9, :], g[..., 9:18, :], g[..., 18:27, :]
    out = np.zeros(lead + (9, 9, 9))
    out += row_g[..., :, None, :]
    out += col_g[..., None, :, :]
    out += (block_g.reshape(lead + (3, 3, 9))[..., :, None, :, None, :]
            * np.ones(lead + (3, 3, 3, 3, 9))).reshape(lead + (9, 9, 9))
    return out.reshape(lead + (81, 9))


def sudoku_penalty(x: Node, puzzles: int = 1) -> Node:
    """Total quadratic group-violation penalty of a (puzzles*81)x9 matrix."""
    if x.shape != (puzzles * GRID_CELLS, DIGITS):
        raise ValueError(f"expected shape {(puzzles * GRID_CELLS, DIGITS)}, got {x.shape}")

    def forward(v):
        return group_sums(v.reshape(puzzles, GRID_CELLS, DIGITS)).reshape(puzzles * 27, DIGITS)

    def adjoint(g):
        return group_sums_adjoint(g.reshape(puzzles, 27, DIGITS)).reshape(puzzles * GRID_CELLS, DIGITS)

    sums = linear_op(x, forward, adjoint)
    return (sums - 1.0).pow(2.0).sum()


def penalty_batch(grids: np.ndarray) -> np.ndarray:
    """Penalty of each (..., 81, 9) grid, without a tape."""
    return ((group_sums(grids) - 1.0) ** 2).sum(axis=(-2, -1))


def is_valid_grid(indices) -> bool:
    """Direct validity check: every group holds each digit exactly once."""
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.shape != (GRID_CELLS,):
        raise ValueError("expected 81 cell digits")
    return all(sorted(indices[g]) == list(range(9)) for g in GROUPS)


@dataclass(frozen=True)
class SudokuProblem:
    """A puzzle: clue digits (0 = blank), derived masks and constants."""

    clues: np.ndarray         # (81,) ints in [0, 9], 0 for blank
    free_cells: np.ndarray    # indices of blank cells
    clue_onehot: np.ndarray   # (81, 9) with one-hot clue rows, zero free rows

    @classmethod
    def from_clues(cls, clues) -> "SudokuProblem":
        clues = np.asarray(clues, dtype=np.int64).ravel()
        if clues.shape != (GRID_CELLS,) or clues.min() < 0 or clues.max() > 9:
            raise ValueError("clues must be 81 digits in [0, 9]")
        free = np.flatnonzero(clues == 0)
        onehot = np.zeros((GRID_CELLS, DIGITS))
        given = np.flatnonzero(clues > 0)
        onehot[given, clues[given] - 1] = 1.0
        return cls(clues=clues, free_cells=free, clue_onehot=onehot)

    @property
    def free_count(self) -> int:
        return self.free_cells.size


def parse_puzzles(text: str):
    """Parse puzzles from text, one per line: 81 chars, digits and '.'/'0'."""
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if len(line) != GRID_CELLS:
            raise ValueError(f"line {lineno}: expected 81 characters, got {len(line)}")
        digits = [0 if ch in ".0" else int(ch) for ch in line]
        problems.append(SudokuProblem.from_clues(digits))
    return problems


def load_puzzle_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_puzzles(fh.read())


def _complete_grid(rng: np.random.Generator) -> np.ndarray:
    """Random full valid grid via backtracking with shuffled digit order."""
    grid = np.zeros(GRID_CELLS, dtype=np.int64)
    cell_groups = [[] for _ in range(GRID_CELLS)]
    for gi, group in enumerate(GROUPS):
        for cell in group:
            cell_groups[cell].append(gi)
    used = [set() for _ in range(27)]

    def fill(cell: int) -> bool:
        if cell == GRID_CELLS:
            return True
        digits = rng.permutation(9) + 1
        for d in digits:
            if any(d in used[g] for g in cell_groups[cell]):
                continue
            grid[cell] = d
            for g in cell_groups[cell]:
                used[g].add(d)
            if fill(cell + 1):
                return True
            grid[cell] = 0
            for g in cell_groups[cell]:
                used[g].discard(d)
        return False

    if not fill(0):
        raise RuntimeError("backtracking failed to produce a grid")
    return grid


def generate_puzzles(count: int, seed: int, min_clues: int = 28, max_clues: int = 34):
    """Deterministically generate solvable puzzles by masking complete grids."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5D0)))
    problems = []
    for _ in range(count):
        full = _complete_grid(rng)
        keep = int(rng.integers(min_clues, max_clues + 1))
        kept = rng.choice(GRID_CELLS, size=keep, replace=False)
        clues = np.zeros(GRID_CELLS, dtype=np.int64)
        clues[kept] = full[kept]
        problems.append(SudokuProblem.from_clues(clues))
    return problems


# ---------------------------------------------------------------------------
# Batched objective over several puzzles
# ---------------------------------------------------------------------------


class SudokuBatch:
    """Stacks the free cells of several puzzles into one logit matrix.

    The objective embeds the stacked free rows back into the (P*81)x9 grid
    matrix (clue rows are constants), then sums the quadratic penalty over
    puzzles.  Gradients never touch clue cells by construction.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        self.free_counts = np.array([p.free_count for p in self.problems])
        offsets = np.concatenate([[0], np.cumsum(self.free_counts)])
        self.total_free = int(offsets[-1])
        # global row index (puzzle-major) of each stacked free cell
        self.scatter_index = np.concatenate([
            p.free_cells + GRID_CELLS * i for i, p in enumerate(self.problems)
        ])
        self.clue_matrix = np.concatenate([p.clue_onehot for p in self.problems], axis=0)

    @property
    def count(self) -> int:
        return len(self.problems)

    def embed(self, x: Node) -> Node:
        """Scatter stacked free rows into the full grid matrix, add clues."""
        idx = self.scatter_index
        shape = (self.count * GRID_CELLS, DIGITS)

        def forward(v):
            out = np.zeros(shape)
            out[idx] = v
            return out

        def adjoint(g):
            return g[idx]

        return linear_op(x, forward, adjoint) + x.tape.constant(self.clue_matrix)

    def objective(self, x: Node) -> Node:
        return sudoku_penalty(self.embed(x), puzzles=self.count)

    def grids_from_free(self, free_rows: np.ndarray) -> np.ndarray:
        """Assemble (..., P, 81, 9) grids from stacked free rows (..., F, 9)."""
        lead = free_rows.shape[:-2]
        out = np.broadcast_to(
            self.clue_matrix.reshape((1,) * len(lead) + self.clue_matrix.shape),
            lead + self.clue_matrix.shape,
        ).copy()
        out[..., self.scatter_index, :] = free_rows
        return out.reshape(lead + (self.count, GRID_CELLS, DIGITS))

    def argmax_grids(self, free_logits: np.ndarray) -> np.ndarray:
        """Hard argmax completion of every puzzle: (P, 81) digit indices."""
        free_rows = np.zeros((self.total_free, DIGITS))
        free_rows[np.arange(self.total_free), np.argmax(free_logits, axis=1)] = 1.0
        grids = self.grids_from_free(free_rows)
        return np.argmax(grids, axis=-1)
