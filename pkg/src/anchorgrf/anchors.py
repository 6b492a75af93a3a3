"""Partitioning anchorsets.

An anchorset partitions the grid into disjoint axis-aligned blocks; the mean
of the field over each block is one anchor.  The induced matrix H (one
averaging row per block) turns a field vector y into the anchor vector
theta = H y.  Adaptive refinement works by splitting one block into two; the
"umbrella" anchorset of all children lets every candidate refinement be
expressed as a linear map of a single estimated density.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidAnchorsetError, InvalidParameterError
from .gaussian import GaussianMoments, condition_gaussian, conditional_simulate
from .grids import FieldRealization, Grid


@dataclass(frozen=True)
class Block:
    """Axis-aligned index block, lo inclusive / hi exclusive per axis."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise InvalidParameterError(f"empty or malformed block {self.lo}..{self.hi}")
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def cells(self, grid: Grid) -> np.ndarray:
        """Sorted flat indices of the block's cells on ``grid``."""
        ranges = [np.arange(l, h) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.dims)

    def spec(self) -> str:
        """Compact human-readable span, e.g. ``0:50`` or ``0:30x20:40``."""
        return "x".join(f"{l}:{h}" for l, h in zip(self.lo, self.hi))

    @staticmethod
    def from_spec(text: str) -> "Block":
        parts = [p.split(":") for p in text.split("x")]
        return Block(lo=tuple(int(p[0]) for p in parts), hi=tuple(int(p[1]) for p in parts))

    def split(self) -> tuple["Block", "Block"]:
        """Halve along the longest axis (ties toward the first axis).

        The lower-index child takes the extra cell when the length is odd.
        """
        shape = self.shape
        axis = int(np.argmax(shape))        # argmax takes the first on ties
        length = shape[axis]
        if length < 2:
            raise InvalidParameterError(f"block {self.spec()} cannot be split")
        left_len = length - length // 2
        mid = self.lo[axis] + left_len
        lo2 = list(self.lo)
        hi1 = list(self.hi)
        hi1[axis] = mid
        lo2[axis] = mid
        return Block(self.lo, tuple(hi1)), Block(tuple(lo2), self.hi)


@dataclass(frozen=True)
class AnchorSet:
    """Disjoint, exhaustive partition of a grid into blocks."""

    grid: Grid
    blocks: tuple[Block, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        seen = np.zeros(self.grid.n_cells, dtype=bool)
        for b in self.blocks:
            idx = b.cells(self.grid)
            if np.any(seen[idx]):
                raise InvalidAnchorsetError(f"block {b.spec()} overlaps another block")
            seen[idx] = True
        if not np.all(seen):
            raise InvalidAnchorsetError("blocks do not cover the grid")

    @property
    def n_anchors(self) -> int:
        return len(self.blocks)

    def matrix(self) -> np.ndarray:
        """Averaging matrix H: row i is 1/|block_i| on block i's cells."""
        H = np.zeros((self.n_anchors, self.grid.n_cells))
        for i, b in enumerate(self.blocks):
            idx = b.cells(self.grid)
            H[i, idx] = 1.0 / idx.size
        return H

    def specs(self) -> list[str]:
        return [b.spec() for b in self.blocks]


@dataclass(frozen=True)
class LinearData:
    """Directly observed linear functionals ell = L y of the field."""

    L: np.ndarray
    ell: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        ell = np.atleast_1d(np.asarray(self.ell, dtype=float))
        if L.shape[0] != ell.shape[0]:
            raise InvalidParameterError("L rows and ell length differ")
        if np.linalg.matrix_rank(L) < L.shape[0]:
            raise InvalidParameterError("linear-data rows are rank deficient")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "ell", ell)

    @property
    def m(self) -> int:
        return self.L.shape[0]

    @staticmethod
    def point_values(grid: Grid, cells, values) -> "LinearData":
        """Point measurements of the field at the given flat cell indices."""
        cells = np.atleast_1d(np.asarray(cells, dtype=int))
        L = np.zeros((cells.size, grid.n_cells))
        L[np.arange(cells.size), cells] = 1.0
        return LinearData(L=L, ell=values)


@dataclass(frozen=True)
class SplitCandidate:
    """A single block split: parent index plus its two children."""

    parent_index: int
    children: tuple[Block, Block]


def initial_anchorset(grid: Grid) -> AnchorSet:
    """Starting partition that bisects every axis (2 blocks in 1-D, 4 in 2-D).

    Odd axis lengths give the extra cell to the lower-index half.
    """
    per_axis = []
    for d in grid.dims:
        left = d - d // 2
        per_axis.append(((0, left), (left, d)))
    blocks = [
        Block(lo=tuple(seg[0] for seg in combo), hi=tuple(seg[1] for seg in combo))
        for combo in itertools.product(*per_axis)
    ]
    return AnchorSet(grid=grid, blocks=tuple(blocks))


def apply_anchors(aset: AnchorSet, y: FieldRealization | np.ndarray) -> np.ndarray:
    """Anchor values theta_i = mean of y over block i."""
    values = y.values if isinstance(y, FieldRealization) else np.asarray(y, dtype=float)
    return np.array([values[b.cells(aset.grid)].mean() for b in aset.blocks])


def anchor_prior_moments(aset: AnchorSet, moments: GaussianMoments,
                         linear: LinearData | None = None) -> GaussianMoments:
    """Normal prior of the anchor vector under the field moments.

    Without linear data this is (H mu, H Sigma H').  With linear data the
    joint normal of (H y, L y) is conditioned on the observed ell.
    """
    H = aset.matrix()
    if linear is None:
        mean = H @ moments.mean
        cov = H @ moments.cov @ H.T
        return GaussianMoments(mean=mean, cov=0.5 * (cov + cov.T))
    A = np.vstack([H, linear.L])
    mean = A @ moments.mean
    cov = A @ moments.cov @ A.T
    joint = GaussianMoments(mean=mean, cov=0.5 * (cov + cov.T))
    sel = np.zeros((linear.m, joint.dim))
    sel[np.arange(linear.m), aset.n_anchors + np.arange(linear.m)] = 1.0
    try:
        cond = condition_gaussian(joint, sel, linear.ell)
    except Exception as exc:
        raise InvalidAnchorsetError(f"singular anchor/linear Gram matrix: {exc}") from exc
    k = aset.n_anchors
    return GaussianMoments(mean=cond.mean[:k], cov=cond.cov[:k, :k])


def sample_field_given_anchors(aset: AnchorSet, theta2: np.ndarray,
                               moments: GaussianMoments,
                               linear: LinearData | None,
                               rng: np.random.Generator,
                               chol_cov: np.ndarray | None = None,
                               constraints=None) -> FieldRealization:
    """Draw a field honoring H y = theta2 (and L y = ell) exactly."""
    H = aset.matrix()
    if linear is None:
        A, v = H, np.asarray(theta2, dtype=float)
    else:
        A = np.vstack([H, linear.L])
        v = np.concatenate([np.asarray(theta2, dtype=float), linear.ell])
    y = conditional_simulate(moments, A, v, rng, chol_cov=chol_cov, constraints=constraints)
    return FieldRealization(grid=aset.grid, values=y)


def enumerate_split_candidates(aset: AnchorSet) -> list[SplitCandidate]:
    """One candidate per block that has at least two cells."""
    out = []
    for i, b in enumerate(aset.blocks):
        if b.n_cells >= 2:
            out.append(SplitCandidate(parent_index=i, children=b.split()))
    return out


@dataclass(frozen=True)
class CandidateMap:
    """A candidate anchorset expressed in the umbrella's coordinates."""

    split_parents: tuple[int, ...]        # () for the incumbent
    anchorset: AnchorSet
    restriction: np.ndarray               # theta_candidate = restriction @ theta_umbrella


@dataclass(frozen=True)
class Umbrella:
    """Umbrella anchorset plus the restriction map of every candidate."""

    anchorset: AnchorSet                  # one anchor per child region
    incumbent: CandidateMap
    candidates: tuple[CandidateMap, ...]

    def all_maps(self) -> list[CandidateMap]:
        return [self.incumbent, *self.candidates]


def umbrella_anchorset(aset: AnchorSet, candidates: list[SplitCandidate],
                       max_parallel_splits: int = 1) -> Umbrella:
    """Build the umbrella of all child regions and every restriction map.

    The umbrella has two anchors per splittable block and one per
    unsplittable block.  A block's anchor is recovered from its children by
    the cell-count-weighted average, so each candidate anchor vector is an
    exact linear map of the umbrella's.  ``max_parallel_splits=2`` also
    enumerates candidates splitting two blocks at once.
    """
    by_parent = {c.parent_index: c for c in candidates}
    umbrella_blocks: list[Block] = []
    children_of: dict[int, list[int]] = {}
    for i, b in enumerate(aset.blocks):
        if i in by_parent:
            lo_child, hi_child = by_parent[i].children
            children_of[i] = [len(umbrella_blocks), len(umbrella_blocks) + 1]
            umbrella_blocks.extend([lo_child, hi_child])
        else:
            children_of[i] = [len(umbrella_blocks)]
            umbrella_blocks.append(b)
    umb = AnchorSet(grid=aset.grid, blocks=tuple(umbrella_blocks))

    def restriction_for(split: set[int]) -> tuple[np.ndarray, AnchorSet]:
        rows = []
        blocks = []
        for i, b in enumerate(aset.blocks):
            cols = children_of[i]
            if i in split:
                for c in cols:
                    row = np.zeros(umb.n_anchors)
                    row[c] = 1.0
                    rows.append(row)
                    blocks.append(umbrella_blocks[c])
            else:
                row = np.zeros(umb.n_anchors)
                total = b.n_cells
                for c in cols:
                    row[c] = umbrella_blocks[c].n_cells / total
                rows.append(row)
                blocks.append(b)
        return np.array(rows), AnchorSet(grid=aset.grid, blocks=tuple(blocks))

    inc_B, _ = restriction_for(set())
    incumbent = CandidateMap(split_parents=(), anchorset=aset, restriction=inc_B)
    cand_maps = []
    split_sets: list[tuple[int, ...]] = [(c.parent_index,) for c in candidates]
    if max_parallel_splits >= 2:
        split_sets += [tuple(sorted(pair)) for pair in
                       itertools.combinations(sorted(by_parent), 2)]
    for parents in split_sets:
        B, cand_aset = restriction_for(set(parents))
        cand_maps.append(CandidateMap(split_parents=parents, anchorset=cand_aset, restriction=B))
    return Umbrella(anchorset=umb, incumbent=incumbent, candidates=tuple(cand_maps))
