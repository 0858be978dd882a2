"""Synthetic "where am I" position reasoning on k x k grids of glyphs.

Each object sees the glyph ids in its 3 x 3 neighbourhood.  Two objects are
linked when each lies inside the other's view (Chebyshev distance 1), so
their views overlap in cells that both actually observe; layouts are
resampled until the links connect every object to the anchor, whose
position is given.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from ..data import Example
from ..graph import GraphTopology, fully_connected

EMPTY = 0
OFFSETS = [(dy, dx) for dy in range(-1, 2) for dx in range(-1, 2)]


@dataclass(eq=False)
class WhereAmIInstance:
    grid_k: int
    positions: np.ndarray   # n x 2 (row, col)
    glyphs: np.ndarray      # n, values 1..n_glyphs
    n_glyphs: int
    anchor: int

    @property
    def n_objects(self) -> int:
        return len(self.glyphs)

    @property
    def targets(self) -> np.ndarray:
        return self.positions[:, 0] * self.grid_k + self.positions[:, 1]

    def board(self) -> np.ndarray:
        grid = np.full((self.grid_k, self.grid_k), EMPTY, dtype=np.int64)
        grid[self.positions[:, 0], self.positions[:, 1]] = self.glyphs
        return grid

    def contexts(self) -> np.ndarray:
        """n x 3 x 3 glyph ids around each object; off-grid cells read as empty."""
        padded = np.pad(self.board(), 1, constant_values=EMPTY)
        return np.stack([padded[r:r + 3, c:c + 3] for r, c in self.positions])

    def features(self) -> np.ndarray:
        ctx = self.contexts().reshape(self.n_objects, 9)
        onehot = np.eye(self.n_glyphs + 1, dtype=np.float32)[ctx].reshape(self.n_objects, -1)
        k = self.grid_k
        flag = np.zeros((self.n_objects, 1), dtype=np.float32)
        pos = np.zeros((self.n_objects, 2 * k), dtype=np.float32)
        flag[self.anchor] = 1.0
        r, c = self.positions[self.anchor]
        pos[self.anchor, r] = 1.0
        pos[self.anchor, k + c] = 1.0
        return np.concatenate([onehot, flag, pos], axis=1)

    def to_example(self, split: str = "train") -> Example:
        n = self.n_objects
        topo = fully_connected(n) if n >= 2 else GraphTopology(n, np.zeros((0, 2), dtype=np.int64))
        mask = np.ones(n, dtype=bool)
        mask[self.anchor] = False
        return Example(self.features(), topo, self.targets, mask, split,
                       info={"grid_k": self.grid_k, "n_glyphs": self.n_glyphs})


def feature_dim(grid_k: int, n_glyphs: int) -> int:
    return 9 * (n_glyphs + 1) + 1 + 2 * grid_k


def overlap_linked(positions: np.ndarray) -> bool:
    n = len(positions)
    if n <= 1:
        return True
    cheb = np.abs(positions[:, None, :] - positions[None, :, :]).max(axis=2)
    adj = cheb <= 1
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(adj[i] & ~seen):
            seen[j] = True
            frontier.append(j)
    return bool(seen.all())


def gen_where_am_i(grid_k: int, n_objects: int, n_glyphs: int, rng: np.random.Generator,
                   max_tries: int = 100_000) -> WhereAmIInstance:
    if n_objects < 1 or n_objects > grid_k * grid_k:
        raise ValueError(f"cannot place {n_objects} objects on a {grid_k}x{grid_k} grid")
    if n_glyphs < 2:
        raise ValueError("need at least two glyph types")
    for _ in range(max_tries):
        cells = rng.choice(grid_k * grid_k, size=n_objects, replace=False)
        positions = np.stack([cells // grid_k, cells % grid_k], axis=1)
        if overlap_linked(positions):
            glyphs = rng.integers(1, n_glyphs + 1, size=n_objects)
            anchor = int(rng.integers(n_objects))
            return WhereAmIInstance(grid_k, positions.astype(np.int64), glyphs, n_glyphs, anchor)
    raise RuntimeError(f"no overlap-connected layout found in {max_tries} tries; "
                       "use more objects or a smaller grid")


def _consistent(ctx_a: np.ndarray, ctx_b: np.ndarray, dy: int, dx: int) -> bool:
    """Could b sit at offset (dy, dx) from a, judging only by their 3x3 views?"""
    for (ay, ax) in product(range(3), range(3)):
        by, bx = ay - dy, ax - dx
        if 0 <= by < 3 and 0 <= bx < 3 and ctx_a[ay, ax] != ctx_b[by, bx]:
            return False
    return True


def propagate_candidates(inst: WhereAmIInstance) -> list[set[tuple[int, int]]]:
    """Position propagation from the anchor by exact context matching.

    Breadth-first sweeps repeat until no candidate set grows.  Each object
    collects every cell it could occupy relative to a candidate cell of a
    reached object; ambiguous matches keep all options.
    """
    ctx = inst.contexts()
    k, n = inst.grid_k, inst.n_objects
    offsets = {(a, b): [(dy, dx) for dy, dx in OFFSETS
                        if (dy, dx) != (0, 0) and _consistent(ctx[a], ctx[b], dy, dx)]
               for a in range(n) for b in range(n) if a != b}
    cand: list[set] = [set() for _ in range(n)]
    cand[inst.anchor].add(tuple(int(x) for x in inst.positions[inst.anchor]))
    changed = True
    while changed:
        changed = False
        for a in range(n):
            for b in range(n):
                if a == b or b == inst.anchor or not cand[a]:
                    continue
                new = {(r + dy, c + dx) for (r, c) in cand[a] for dy, dx in offsets[a, b]
                       if 0 <= r + dy < k and 0 <= c + dx < k}
                if not new <= cand[b]:
                    cand[b] |= new
                    changed = True
    return cand
