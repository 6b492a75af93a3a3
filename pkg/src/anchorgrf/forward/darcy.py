"""Steady 1-D saturated groundwater flow through a piecewise-constant medium.

The head satisfies d/dx (K dh/dx) = 0 with h = 1 at the left boundary and
h = 0 at the right.  With cell-wise constant conductivity the flux is a
single constant, so the head profile is exact: the drop across any span is
proportional to its hydraulic resistance (sum of dx / K per cell, with
partial cells prorated).  Scaling K by any constant leaves h unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidParameterError
from ..grids import FieldRealization, Grid


def head_at(logK: np.ndarray, dx: float, x: np.ndarray) -> np.ndarray:
    """Exact head at arbitrary positions x in [0, n*dx].

    Heads are invariant to scaling K, so logK is shifted by its maximum
    before exponentiating; extreme fields cannot overflow.
    """
    logK = np.asarray(logK, dtype=float)
    K = np.exp(logK - logK.max())
    with np.errstate(divide="ignore", over="ignore"):
        res = dx / K
    cum = np.concatenate([[0.0], np.cumsum(res)])   # resistance up to each node
    total = cum[-1]
    x = np.asarray(x, dtype=float)
    cell = np.clip(np.floor(x / dx).astype(int), 0, K.size - 1)
    frac = x - cell * dx
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r_at = cum[cell] + frac / K[cell]
        return 1.0 - r_at / total


@dataclass(frozen=True)
class DarcyPlan:
    """Head observations at fixed cell centers of a 1-D grid."""

    grid: Grid
    obs_cells: tuple[int, ...]

    def __post_init__(self):
        if self.grid.ndim != 1:
            raise InvalidParameterError("darcy model is one-dimensional")
        cells = tuple(int(c) for c in self.obs_cells)
        if any(c < 0 or c >= self.grid.n_cells for c in cells):
            raise InvalidParameterError("observation cell outside grid")
        object.__setattr__(self, "obs_cells", cells)

    @staticmethod
    def evenly_spaced(grid: Grid, n_obs: int = 30) -> "DarcyPlan":
        cells = np.unique(np.round(np.linspace(0, grid.n_cells - 1, n_obs)).astype(int))
        return DarcyPlan(grid=grid, obs_cells=tuple(int(c) for c in cells))


@dataclass(frozen=True)
class DarcyModel:
    """Forward model: log-conductivity field -> heads at planned locations."""

    plan: DarcyPlan

    @property
    def data_dim(self) -> int:
        return len(self.plan.obs_cells)

    def descriptor(self) -> dict:
        return {"kind": "darcy1d", "obs_cells": list(self.plan.obs_cells)}

    def evaluate(self, field: FieldRealization) -> np.ndarray:
        dx = self.plan.grid.spacing[0]
        x = (np.asarray(self.plan.obs_cells, dtype=float) + 0.5) * dx
        return head_at(field.values, dx, x)
