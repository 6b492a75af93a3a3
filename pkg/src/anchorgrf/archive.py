"""Run archive: everything a finished or interrupted run leaves on disk.

Layout (one directory per run):

    config.json               resolved configuration
    truth/                    synthetic truth, observations, linear data
    it_0000/                  initial state (f0)
    it_0001/ ... it_NNNN/     per-iteration snapshot:
        mixture_{weights,means,covs}.npy   posterior over internal coords
        state.json                         anchorset, cover, labels
        mad_baseline.npy                   first-iteration per-dim mads
        theta_q.npy, z_q.npy               step-1/2 sample quantiles
        record.json                        IterationRecord (written last;
                                           its presence marks completion)
    ensemble/fields.npy       posterior field realizations
    diagnostics.csv           Table-style per-iteration summary

Numeric payloads are raw .npy files, so reruns with identical seeds produce
byte-identical arrays; record.json additionally stores wall-clock times,
which are excluded from that guarantee.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorSet, Block, apply_anchors
from .config import ExperimentConfig, TruthPackage
from .engine import (
    QUANTILE_LEVELS,
    DefensiveCover,
    InversionState,
    IterationExtras,
    IterationRecord,
)
from .errors import ArchiveIntegrityError
from .geostat import GeostatPrior
from .grids import FieldRealization, Grid
from .mixtures import NormalMixture

DIAGNOSTIC_COLUMNS = ("iteration", "n", "anchors", "m", "Lstar", "mad_median", "mad_max")
ENSEMBLE_COLUMNS = ("cell_index", "p05", "p25", "p50", "p75", "p95", "truth")
ANCHOR_COLUMNS = ("iteration", "anchor_id", "support_spec",
                  "q05", "q25", "q50", "q75", "q95", "target_value")
PREDICTION_COLUMNS = ("iteration", "dim", "observed", "q05", "q25", "q50", "q75", "q95")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


@dataclass
class RunArchive:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    # -- layout helpers -----------------------------------------------------

    def iter_dir(self, k: int) -> Path:
        return self.root / f"it_{k:04d}"

    def completed_iterations(self) -> list[int]:
        """Iterations with a finished snapshot, in order."""
        out = []
        for p in sorted(self.root.glob("it_*")):
            k = int(p.name.split("_")[1])
            if k == 0:
                if (p / "state.json").exists():
                    out.append(k)
            elif (p / "record.json").exists():
                out.append(k)
        return out

    # -- writing ------------------------------------------------------------

    def write_config(self, config: ExperimentConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        config.save(self.root / "config.json")

    def write_truth(self, package: TruthPackage) -> None:
        tdir = self.root / "truth"
        tdir.mkdir(parents=True, exist_ok=True)
        np.save(tdir / "field.npy", package.truth.values)
        np.save(tdir / "field_fine.npy", package.truth_fine.values)
        np.save(tdir / "z_obs.npy", package.z_obs)
        meta = {
            "grid_dims": list(package.truth.grid.dims),
            "grid_spacing": list(package.truth.grid.spacing),
            "fine_dims": list(package.truth_fine.grid.dims),
            "fine_spacing": list(package.truth_fine.grid.spacing),
            "linear_cells": list(package.linear_cells),
            "linear_values": ([] if package.linear is None
                              else [float(v) for v in package.linear.ell]),
        }
        (tdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def write_state(self, state: InversionState, labels: list[str],
                    extras: IterationExtras | None = None,
                    record: IterationRecord | None = None,
                    draw_anchorset: list[str] | None = None) -> None:
        d = self.iter_dir(state.iteration)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "mixture_weights.npy", state.posterior.weights)
        np.save(d / "mixture_means.npy", state.posterior.means)
        np.save(d / "mixture_covs.npy", state.posterior.covs)
        if state.mad_baseline is not None:
            np.save(d / "mad_baseline.npy", state.mad_baseline)
        if extras is not None:
            np.save(d / "theta_q.npy", extras.theta_quantiles)
            np.save(d / "z_q.npy", extras.z_quantiles)
        cover = state.cover
        meta = {
            "iteration": state.iteration,
            "anchorset": [b.spec() for b in state.anchorset.blocks],
            "draw_anchorset": draw_anchorset,
            "draw_labels": None if extras is None else extras.labels,
            "labels": labels,
            "cover": {
                "has_prior": cover.prior is not None,
                "prior": (None if cover.prior is None else {
                    "lam_shape": cover.prior.lam_shape, "lam_scale": cover.prior.lam_scale,
                    "tau_a": cover.prior.tau_a, "tau_b": cover.prior.tau_b}),
                "beta_center": cover.beta_center, "beta_sd": cover.beta_sd,
                "log_eta2_center": cover.log_eta2_center,
                "log_eta2_sd": cover.log_eta2_sd,
                "ell_center": cover.ell_center,
            },
        }
        (d / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if record is not None:
            # written last: marks the snapshot complete
            (d / "record.json").write_text(
                json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_ensemble(self, fields: np.ndarray) -> None:
        d = self.root / "ensemble"
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "fields.npy", fields)

    def write_diagnostics(self, records: list[IterationRecord]) -> None:
        rows = [(r.iteration, r.n, r.n_anchors, r.m, r.lstar, r.mad_median, r.mad_max)
                for r in records]
        _write_csv(self.root / "diagnostics.csv", DIAGNOSTIC_COLUMNS, rows)

    # -- reading ------------------------------------------------------------

    def load_config(self) -> ExperimentConfig:
        path = self.root / "config.json"
        if not path.exists():
            raise ArchiveIntegrityError(f"no config.json under {self.root}")
        return ExperimentConfig.load(path)

    def load_truth(self) -> tuple[FieldRealization, np.ndarray, dict]:
        tdir = self.root / "truth"
        try:
            meta = json.loads((tdir / "meta.json").read_text())
            grid = Grid(dims=tuple(meta["grid_dims"]), spacing=tuple(meta["grid_spacing"]))
            field = FieldRealization(grid, np.load(tdir / "field.npy"))
            z_obs = np.load(tdir / "z_obs.npy")
        except (OSError, KeyError, ValueError) as exc:
            raise ArchiveIntegrityError(f"truth payload unreadable: {exc}") from exc
        return field, z_obs, meta

    def load_record(self, k: int) -> IterationRecord:
        path = self.iter_dir(k) / "record.json"
        if not path.exists():
            raise ArchiveIntegrityError(f"missing snapshot for iteration {k}")
        return IterationRecord.from_dict(json.loads(path.read_text()))

    def load_records(self) -> list[IterationRecord]:
        return [self.load_record(k) for k in self.completed_iterations() if k > 0]

    def load_state(self, k: int, grid: Grid) -> InversionState:
        d = self.iter_dir(k)
        if not (d / "state.json").exists():
            raise ArchiveIntegrityError(f"missing snapshot for iteration {k}")
        meta = json.loads((d / "state.json").read_text())
        blocks = tuple(Block.from_spec(s) for s in meta["anchorset"])
        aset = AnchorSet(grid=grid, blocks=blocks)
        try:
            mixture = NormalMixture(
                weights=np.load(d / "mixture_weights.npy"),
                means=np.load(d / "mixture_means.npy"),
                covs=np.load(d / "mixture_covs.npy"),
            )
        except (OSError, ValueError) as exc:
            raise ArchiveIntegrityError(
                f"iteration {k}: mixture payload unreadable: {exc}") from exc
        if mixture.dim != len(meta["labels"]):
            raise ArchiveIntegrityError(
                f"iteration {k}: mixture dimension {mixture.dim} does not match "
                f"{len(meta['labels'])} labels")
        cv = meta["cover"]
        cover = DefensiveCover(
            prior=(GeostatPrior(**cv["prior"]) if cv["has_prior"] else None),
            beta_center=cv["beta_center"], beta_sd=cv["beta_sd"],
            log_eta2_center=cv["log_eta2_center"], log_eta2_sd=cv["log_eta2_sd"],
            ell_center=cv["ell_center"],
        )
        mad_path = d / "mad_baseline.npy"
        mad0 = np.load(mad_path) if mad_path.exists() else None
        history = tuple(self.load_record(j) for j in range(1, k + 1))
        return InversionState(iteration=k, anchorset=aset, posterior=mixture,
                              cover=cover, mad_baseline=mad0, history=history)

    # -- exports ------------------------------------------------------------

    def export_diagnostics(self, out: Path) -> Path:
        records = self.load_records()
        rows = [(r.iteration, r.n, r.n_anchors, r.m, r.lstar, r.mad_median, r.mad_max)
                for r in records]
        _write_csv(out, DIAGNOSTIC_COLUMNS, rows)
        return out

    def export_ensemble(self, out: Path) -> Path:
        fields_path = self.root / "ensemble" / "fields.npy"
        if not fields_path.exists():
            raise ArchiveIntegrityError("archive has no field ensemble yet")
        fields = np.load(fields_path)
        truth, _, _ = self.load_truth()
        qs = np.percentile(fields, QUANTILE_LEVELS, axis=0)
        rows = [
            (i, qs[0, i], qs[1, i], qs[2, i], qs[3, i], qs[4, i], truth.values[i])
            for i in range(fields.shape[1])
        ]
        _write_csv(out, ENSEMBLE_COLUMNS, rows)
        return out

    def export_anchors(self, out: Path) -> Path:
        truth, _, _ = self.load_truth()
        rows = []
        for k in self.completed_iterations():
            if k == 0:
                continue
            d = self.iter_dir(k)
            meta = json.loads((d / "state.json").read_text())
            draw_labels = meta["draw_labels"]
            theta_q = np.load(d / "theta_q.npy")
            specs = meta["draw_anchorset"]
            aset = AnchorSet(grid=truth.grid,
                             blocks=tuple(Block.from_spec(s) for s in specs))
            targets = apply_anchors(aset, truth)
            for i, label in enumerate(draw_labels):
                if not label.startswith("anchor_"):
                    continue
                a = int(label.split("_")[1])
                rows.append((k, a, specs[a], *theta_q[i], targets[a]))
        _write_csv(out, ANCHOR_COLUMNS, rows)
        return out

    def export_predictions(self, out: Path) -> Path:
        _, z_obs, _ = self.load_truth()
        rows = []
        for k in self.completed_iterations():
            if k == 0:
                continue
            z_q = np.load(self.iter_dir(k) / "z_q.npy")
            for j in range(z_q.shape[0]):
                rows.append((k, j, z_obs[j], *z_q[j]))
        _write_csv(out, PREDICTION_COLUMNS, rows)
        return out

    def export(self, what: str, out: Path) -> Path:
        dispatch = {
            "diagnostics": self.export_diagnostics,
            "ensemble": self.export_ensemble,
            "anchors": self.export_anchors,
            "predictions": self.export_predictions,
        }
        if what not in dispatch:
            raise ArchiveIntegrityError(
                f"unknown export kind {what!r}; choose from {sorted(dispatch)}")
        return dispatch[what](Path(out))
