"""Command-line harness: run, resume, export, truth.

Every run is fully determined by its config file plus the two seeds; the
archive written under the output directory replays and resumes exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .archive import RunArchive
from .config import ExperimentConfig, build_forward, build_problem, make_truth_package
from .engine import (
    anchor_posterior_moments,
    init_state,
    linear_gaussian_posterior,
    posterior_field_ensemble,
    run_iteration,
)
from .errors import AnchorGrfError
from .gaussian import GaussianMoments
from .geostat import build_covariance

TABLE_HEADER = (f"{'it':>3} {'n':>5} {'anchors':>7} {'m':>3} "
                f"{'L*':>9} {'mad_med':>9} {'mad_max':>9} {'n_eff':>6}  accepted")


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "seed_truth", None) is not None:
        updates["truth_seed"] = args.seed_truth
    if getattr(args, "seed_run", None) is not None:
        updates["run_seed"] = args.seed_run
    if getattr(args, "threads", None) is not None:
        updates["engine"] = {**config.engine, "threads": args.threads}
    return replace(config, **updates) if updates else config


def _print_record(r) -> None:
    print(f"{r.iteration:3d} {r.n:5d} {r.n_anchors:7d} {r.m:3d} "
          f"{r.lstar:9.2f} {r.mad_median:9.4f} {r.mad_max:9.4f} {r.n_eff:6.0f}  {r.accepted}")


def _finish_run(archive: RunArchive, config: ExperimentConfig, problem, state) -> None:
    archive.write_diagnostics(state.history)
    if config.ensemble_size > 0:
        fields = posterior_field_ensemble(problem, state, config.ensemble_size,
                                          config.run_seed)
        archive.write_ensemble(fields)
    if config.example == "linear-oracle":
        report = _oracle_report(config, problem, state)
        (archive.root / "oracle_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
        print("linear-oracle report: max |mean error| "
              f"{report['max_abs_mean_error_sd']:.3f} analytic SDs; "
              f"sd ratio range [{report['sd_ratio_min']:.3f}, {report['sd_ratio_max']:.3f}]")


def _oracle_report(config: ExperimentConfig, problem, state) -> dict:
    cov = build_covariance(problem.grid, problem.fixed_params)
    moments = GaussianMoments(mean=np.full(problem.grid.n_cells,
                                           problem.fixed_params.beta), cov=cov)
    H = state.anchorset.matrix()
    ref = linear_gaussian_posterior(moments, H, problem.forward.G, problem.z_obs)
    mean, post_cov = anchor_posterior_moments(problem, state)
    sd = np.sqrt(np.diag(ref.cov))
    err = (mean - ref.mean) / sd
    ratio = np.sqrt(np.diag(post_cov)) / sd
    return {
        "analytic_mean": [float(v) for v in ref.mean],
        "analytic_sd": [float(v) for v in sd],
        "posterior_mean": [float(v) for v in mean],
        "posterior_sd": [float(v) for v in np.sqrt(np.diag(post_cov))],
        "mean_error_sd": [float(v) for v in err],
        "max_abs_mean_error_sd": float(np.max(np.abs(err))),
        "sd_ratio_min": float(ratio.min()),
        "sd_ratio_max": float(ratio.max()),
    }


def cmd_run(args) -> int:
    config = _apply_overrides(ExperimentConfig.load(args.config), args)
    archive = RunArchive(Path(config.output_dir))
    if archive.root.exists() and archive.completed_iterations():
        print(f"error: {archive.root} already holds a run; "
              "use `resume` or a fresh --out", file=sys.stderr)
        return 2
    archive.write_config(config)
    package = make_truth_package(config)
    archive.write_truth(package)
    problem = build_problem(config, package)
    settings = config.engine_settings()

    state = init_state(problem, settings, config.run_seed)
    archive.write_state(state, problem.internal_labels(state.anchorset))
    print(TABLE_HEADER)
    for _ in range(settings.n_iterations):
        draw_specs = state.anchorset.specs()
        state, extras = run_iteration(problem, settings, state, config.run_seed)
        archive.write_state(state, problem.internal_labels(state.anchorset),
                            extras=extras, record=state.history[-1],
                            draw_anchorset=draw_specs)
        archive.write_diagnostics(state.history)
        _print_record(state.history[-1])
    _finish_run(archive, config, problem, state)
    return 0


def cmd_resume(args) -> int:
    archive = RunArchive(Path(args.archive))
    config = archive.load_config()
    settings = config.engine_settings()
    done = archive.completed_iterations()
    if not done:
        print("error: archive has no completed snapshots", file=sys.stderr)
        return 2
    last = done[-1]
    expected = list(range(0, last + 1))
    if done != expected:
        missing = sorted(set(expected) - set(done))
        print(f"error: archive integrity: missing snapshot for iteration(s) {missing}",
              file=sys.stderr)
        return 2
    package = make_truth_package(config)
    problem = build_problem(config, package)
    if last >= settings.n_iterations:
        print(f"run already complete at iteration {last}; nothing to do")
        return 0
    state = archive.load_state(last, config.grid)
    print(f"resuming after iteration {last}")
    print(TABLE_HEADER)
    for _ in range(last, settings.n_iterations):
        draw_specs = state.anchorset.specs()
        state, extras = run_iteration(problem, settings, state, config.run_seed)
        archive.write_state(state, problem.internal_labels(state.anchorset),
                            extras=extras, record=state.history[-1],
                            draw_anchorset=draw_specs)
        archive.write_diagnostics(state.history)
        _print_record(state.history[-1])
    _finish_run(archive, config, problem, state)
    return 0


def cmd_export(args) -> int:
    archive = RunArchive(Path(args.archive))
    out = Path(args.out) if args.out else archive.root / f"{args.what}.csv"
    path = archive.export(args.what, out)
    print(f"wrote {path}")
    return 0


def cmd_truth(args) -> int:
    config = _apply_overrides(ExperimentConfig.load(args.config), args)
    package = make_truth_package(config)
    t = package.truth
    print(f"truth on {t.grid.dims} grid (seed {config.truth_seed}): "
          f"range [{t.values.min():.4f}, {t.values.max():.4f}], "
          f"mean {t.values.mean():.4f}, sd {t.values.std():.4f}")
    print(f"observation vector: {package.z_obs.shape[0]} entries, "
          f"range [{package.z_obs.min():.4f}, {package.z_obs.max():.4f}]")
    if package.linear is not None:
        print(f"linear data at cells {list(package.linear_cells)}: "
              f"{[round(float(v), 4) for v in package.linear.ell]}")
    if args.out:
        archive = RunArchive(Path(args.out))
        archive.root.mkdir(parents=True, exist_ok=True)
        archive.write_config(config)
        archive.write_truth(package)
        print(f"persisted truth under {archive.root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorgrf",
        description="Anchor-based inversion of Gaussian random fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute all iterations of an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides config)")
    run.add_argument("--seed-truth", type=int)
    run.add_argument("--seed-run", type=int)
    run.add_argument("--threads", type=int)
    run.set_defaults(func=cmd_run)

    res = sub.add_parser("resume", help="continue an interrupted run")
    res.add_argument("--archive", required=True)
    res.set_defaults(func=cmd_resume)

    exp = sub.add_parser("export", help="write columnar views of an archive")
    exp.add_argument("--archive", required=True)
    exp.add_argument("what", choices=["diagnostics", "ensemble", "anchors", "predictions"])
    exp.add_argument("--out")
    exp.set_defaults(func=cmd_export)

    tr = sub.add_parser("truth", help="generate or inspect a synthetic truth")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", help="persist the truth package here")
    tr.add_argument("--seed-truth", type=int)
    tr.set_defaults(func=cmd_truth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AnchorGrfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
