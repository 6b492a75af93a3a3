"""Synthetic-truth generation and grid aggregation."""

from __future__ import annotations

import numpy as np

from .. import rng as rngmod
from ..errors import InvalidParameterError
from ..gaussian import GaussianMoments, sample_gaussian
from ..geostat import GeostatParams, build_covariance
from ..grids import FieldRealization, Grid


def make_synthetic_truth(grid: Grid, params: GeostatParams, seed: int) -> FieldRealization:
    """One unconditional field draw from the stationary model, fixed by seed."""
    cov = build_covariance(grid, params)
    moments = GaussianMoments(mean=np.full(grid.n_cells, params.beta), cov=cov)
    stream = rngmod.substream(seed, rngmod.TRUTH_FIELD)
    return FieldRealization(grid=grid, values=sample_gaussian(moments, stream))


def coarsen(fine: FieldRealization, factors: tuple[int, ...],
            coarse_spacing: tuple[float, ...] | None = None) -> FieldRealization:
    """Aggregate by block means; every factor must divide its axis length."""
    grid = fine.grid
    if len(factors) != grid.ndim:
        raise InvalidParameterError("one factor per axis required")
    factors = tuple(int(f) for f in factors)
    if any(f < 1 for f in factors):
        raise InvalidParameterError("factors must be >= 1")
    if any(d % f for d, f in zip(grid.dims, factors)):
        raise InvalidParameterError(f"factors {factors} do not divide dims {grid.dims}")
    new_dims = tuple(d // f for d, f in zip(grid.dims, factors))
    spacing = coarse_spacing or tuple(s * f for s, f in zip(grid.spacing, factors))
    arr = fine.reshape()
    if grid.ndim == 1:
        vals = arr.reshape(new_dims[0], factors[0]).mean(axis=1)
    else:
        vals = arr.reshape(new_dims[0], factors[0], new_dims[1], factors[1]).mean(axis=(1, 3))
    return FieldRealization(grid=Grid(dims=new_dims, spacing=spacing), values=vals.ravel())
