"""Regular 1-D / 2-D grids.

Cells are enumerated in C order (last axis fastest).  All coordinates refer
to cell centers, in physical units (meters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class Grid:
    """Regular grid with per-axis cell counts and physical cell sizes."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        if len(self.dims) not in (1, 2):
            raise InvalidParameterError(f"only 1-D/2-D grids supported, got dims={self.dims}")
        if len(self.spacing) != len(self.dims):
            raise InvalidParameterError("spacing must have one entry per axis")
        if any(int(d) < 2 for d in self.dims):
            raise InvalidParameterError(f"every axis needs >= 2 cells, got {self.dims}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise InvalidParameterError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def lengths(self) -> tuple[float, ...]:
        """Physical extent per axis."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def cell_centers(self) -> np.ndarray:
        """(n_cells, ndim) array of cell-center coordinates, C order."""
        axes = [(np.arange(d) + 0.5) * s for d, s in zip(self.dims, self.spacing)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def distance_matrix(self) -> np.ndarray:
        """Dense (n_cells, n_cells) matrix of center-to-center distances."""
        x = self.cell_centers()
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))

    def ravel_index(self, idx: tuple[int, ...]) -> int:
        return int(np.ravel_multi_index(idx, self.dims))

    def unravel_index(self, flat: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(flat, self.dims))


@dataclass(frozen=True)
class FieldRealization:
    """One realization of the (log-attribute) field on a grid."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise InvalidParameterError(
                f"field length {v.shape} does not match grid with {self.grid.n_cells} cells"
            )
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("field contains non-finite entries")
        object.__setattr__(self, "values", v)

    def reshape(self) -> np.ndarray:
        """Values as an ndim-shaped array."""
        return self.values.reshape(self.grid.dims)
