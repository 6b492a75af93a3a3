"""Experiment configuration: one JSON file fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .anchors import LinearData
from .engine import EngineSettings, InitCenter, Problem
from .errors import ConfigError
from .forward import (
    DarcyModel,
    EikonalModel,
    LinearForwardModel,
    RunoffModel,
    TomographyPlan,
    coarsen,
    make_synthetic_truth,
)
from .forward.darcy import DarcyPlan
from .geostat import GeostatParams, GeostatPrior
from .grids import FieldRealization, Grid
from .mixtures import KdeTuning

EXAMPLES = ("darcy", "runoff", "eikonal", "linear-oracle", "custom")


@dataclass(frozen=True)
class ExperimentConfig:
    example: str
    grid_dims: tuple[int, ...]
    grid_spacing: tuple[float, ...]
    truth_seed: int
    run_seed: int
    truth_params: dict = field(default_factory=dict)      # beta/lam/eta2/tau
    prior: dict = field(default_factory=dict)             # gamma/beta hyperparameters
    init: dict = field(default_factory=dict)              # InitCenter fields
    engine: dict = field(default_factory=dict)            # EngineSettings overrides
    forward: dict = field(default_factory=dict)           # per-model options
    fixed_geostat: dict | None = None                     # set => geostat block fixed
    linear_data: dict | None = None                       # {"mode": "random_cell", "count": 1}
    error_cov: float | list | None = None
    ensemble_size: int = 1000
    output_dir: str = "runs/out"

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ConfigError(f"unknown example {self.example!r}; pick from {EXAMPLES}")
        if self.engine.get("n_iterations", 1) < 1:
            raise ConfigError("schedule must cover at least one iteration")
        thr = self.engine.get("pca_threshold", 0.99)
        if not (0.0 < thr <= 1.0):
            raise ConfigError(f"pca_threshold must be in (0, 1], got {thr}")
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        object.__setattr__(self, "grid_spacing", tuple(float(s) for s in self.grid_spacing))

    # -- serialization ------------------------------------------------------

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**d)

    @staticmethod
    def load(path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- assembly -----------------------------------------------------------

    @property
    def grid(self) -> Grid:
        return Grid(dims=self.grid_dims, spacing=self.grid_spacing)

    def truth_geostat(self) -> GeostatParams:
        p = {"beta": 0.0, "lam": 10.0, "eta2": 1.0, "tau": 0.01, **self.truth_params}
        return GeostatParams(**p)

    def geostat_prior(self) -> GeostatPrior:
        defaults = {"lam_shape": 2.0,
                    "lam_scale": 0.25 * max(self.grid.lengths),
                    "tau_a": 1.0, "tau_b": 9.0}
        return GeostatPrior(**{**defaults, **self.prior})

    def init_center(self) -> InitCenter:
        return InitCenter(**self.init) if self.init else InitCenter()

    def engine_settings(self) -> EngineSettings:
        e = dict(self.engine)
        kde = KdeTuning(n_eff_floor=e.pop("kde_n_eff_floor", 5.0))
        if "schedule" in e and e["schedule"] is not None:
            e["schedule"] = tuple(int(v) for v in e["schedule"])
        return EngineSettings(kde=kde, **e)

    def error_cov_matrix(self, n_z: int) -> np.ndarray | None:
        if self.error_cov is None:
            return None
        if np.isscalar(self.error_cov):
            return float(self.error_cov) * np.eye(n_z)
        diag = np.asarray(self.error_cov, dtype=float)
        if diag.shape != (n_z,):
            raise ConfigError(f"error_cov diagonal needs {n_z} entries")
        return np.diag(diag)


@dataclass(frozen=True)
class TruthPackage:
    """Synthetic truth plus everything derived from it for one run."""

    truth: FieldRealization          # on the inversion grid
    truth_fine: FieldRealization     # data-generating grid (same unless coarsened)
    z_obs: np.ndarray
    linear: LinearData | None
    linear_cells: tuple[int, ...]


def build_forward(config: ExperimentConfig, grid: Grid):
    """Forward model on the given (inversion) grid."""
    fw = config.forward
    if config.example == "darcy":
        return DarcyModel(plan=DarcyPlan.evenly_spaced(grid, fw.get("n_obs", 30)))
    if config.example == "runoff":
        return RunoffModel(grid=grid, s0=fw.get("s0", 0.01))
    if config.example == "eikonal":
        return EikonalModel(plan=TomographyPlan(
            grid=grid,
            n_sources_per_side=fw.get("n_sources_per_side", 6),
            n_receivers_per_side=fw.get("n_receivers_per_side", 10),
            n_receivers_top=fw.get("n_receivers_top", 15)))
    if config.example == "linear-oracle":
        g_rng = rngmod.substream(fw.get("operator_seed", 7), rngmod.ORACLE)
        G = g_rng.normal(size=(fw.get("n_obs", 3), grid.n_cells)) * fw.get("scale", 0.5)
        return LinearForwardModel(G=G)
    raise ConfigError(f"no forward model for example {config.example!r}")


def make_truth_package(config: ExperimentConfig) -> TruthPackage:
    """Generate the synthetic truth and observations from the truth seed."""
    fw = config.forward
    factors = tuple(int(f) for f in fw.get("coarsen_factors", ())) or None
    if factors:
        fine_grid = Grid(
            dims=tuple(d * f for d, f in zip(config.grid_dims, factors)),
            spacing=tuple(s / f for s, f in zip(config.grid_spacing, factors)),
        )
    else:
        fine_grid = config.grid
    truth_fine = make_synthetic_truth(fine_grid, config.truth_geostat(), config.truth_seed)
    fine_forward = build_forward(config, fine_grid)
    z_obs = fine_forward.evaluate(truth_fine)
    truth = coarsen(truth_fine, factors, config.grid_spacing) if factors else truth_fine

    linear = None
    cells: tuple[int, ...] = ()
    if config.linear_data:
        mode = config.linear_data.get("mode", "random_cell")
        if mode != "random_cell":
            raise ConfigError(f"unknown linear_data mode {mode!r}")
        count = int(config.linear_data.get("count", 1))
        pick = rngmod.substream(config.truth_seed, rngmod.LINEAR_PICK)
        cells = tuple(int(c) for c in
                      pick.choice(config.grid.n_cells, size=count, replace=False))
        linear = LinearData.point_values(config.grid, list(cells),
                                         truth.values[list(cells)])
    return TruthPackage(truth=truth, truth_fine=truth_fine, z_obs=z_obs,
                        linear=linear, linear_cells=cells)


def build_problem(config: ExperimentConfig, package: TruthPackage) -> Problem:
    grid = config.grid
    forward = build_forward(config, grid)
    err = config.error_cov_matrix(forward.data_dim)
    if config.fixed_geostat is not None:
        return Problem(grid=grid, forward=forward, z_obs=package.z_obs,
                       fixed_params=GeostatParams(**config.fixed_geostat),
                       linear=package.linear, err_cov=err,
                       init_center=config.init_center())
    return Problem(grid=grid, forward=forward, z_obs=package.z_obs,
                   prior=config.geostat_prior(), init_center=config.init_center(),
                   linear=package.linear, err_cov=err)
