"""Command-line surface: one pipeline invocation per (outcome, year) run.

Subcommands wrap the library stages: simulate (synthetic data to CSV),
fit / predict (serialized-forest round trips), scores (through the doubly
robust scores), run (the full pipeline with all analyses), blp / clan /
policy-tree (reanalysis of stored scores), and report (appendix-style
results table over run directories).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .backend import backend_name
from .clate import doubly_robust_scores, predict_clates, residualize
from .data import CausalDataset, FeatureSpec, feature_specs_from_config, load_csv, save_csv
from .dgp import DgpSpec, generate
from .exceptions import ConfigError, IvForestError
from .forest import Forest, ForestParams, grow_forest, tune_forest_params
from .heterogeneity import blp, build_design, clan, clate_histogram
from .nuisance import fit_nuisances
from .policy import learn_depth2
from .report import render_report

Z975 = 1.959963984540054


def _die(stage: str, exc: Exception) -> "NoReturn":
    print(f"error [{stage}]: {exc}", file=sys.stderr)
    raise SystemExit(1)


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _forest_params(cfg: dict, seed: int) -> ForestParams:
    fp = dict(cfg.get("forest", {}))
    fp["seed"] = seed
    return ForestParams(**fp)


def _require_seed(cfg: dict, override):
    if override is not None:
        return int(override)
    if "seed" not in cfg:
        raise ConfigError("config must set an explicit seed (no wall-clock seeding)")
    return int(cfg["seed"])


def _load_dataset(cfg: dict, config_dir: Path) -> CausalDataset:
    ds = cfg.get("dataset")
    if not ds:
        raise ConfigError("config missing 'dataset' section")
    path = Path(ds["path"])
    if not path.is_absolute():
        path = config_dir / path
    specs = feature_specs_from_config(ds.get("features", []))
    if not specs:
        raise ConfigError("dataset config must list features")
    return load_csv(
        path,
        schema=specs,
        outcome=ds.get("outcome", "y"),
        treatment=ds.get("treatment", "d"),
        instrument=ds.get("instrument", "z"),
        cluster=ds.get("cluster", "cluster"),
        discretize=set(ds.get("discretize", [])),
    )


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("IVFOREST_THREADS", "1")))


def _write_clates_csv(path, clates, gamma):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_hat", "se", "gamma", "weak_flag"])
        for i in range(clates.tau_hat.shape[0]):
            w.writerow([
                repr(float(clates.tau_hat[i])),
                "" if np.isnan(clates.se[i]) else repr(float(clates.se[i])),
                repr(float(gamma[i])),
                int(clates.weak_flags[i]),
            ])


def _read_clates_csv(path):
    tau, se, gamma, weak = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tau.append(float(row["tau_hat"]))
            se.append(float(row["se"]) if row["se"] else float("nan"))
            gamma.append(float(row["gamma"]))
            weak.append(bool(int(row["weak_flag"])))
    return (np.asarray(tau), np.asarray(se), np.asarray(gamma), np.asarray(weak))


def _pipeline(cfg: dict, config_dir: Path, out_dir: Path, seed: int, threads: int,
              tune: bool = False) -> dict:
    """Full run; writes the seven artifacts and returns the summary."""
    written: list[Path] = []

    def emit(name, writer):
        path = out_dir / name
        writer(path)
        written.append(path)
        return path

    try:
        stage = "ingest"
        data = _load_dataset(cfg, config_dir)
        params = _forest_params(cfg, seed)
        mode = cfg.get("mode", "instrumental")
        analyses = {
            "clates": True, "blp": True, "clan": True,
            "policy_tree": True, "histogram": True,
        }
        analyses.update(cfg.get("analyses", {}))

        stage = "nuisance"
        nuis = fit_nuisances(data, params, n_threads=threads)

        stage = "tune"
        if tune:
            resid = residualize(data, nuis)
            _, cl = data.cluster_index()
            params = tune_forest_params(
                data.features, resid.y_res, resid.d_res, resid.z_res,
                cl, mode, params,
            )

        stage = "clate"
        clates = predict_clates(data, nuis, params, mode=mode, n_threads=threads)

        stage = "scores"
        scores = doubly_robust_scores(data, nuis, clates)

        summary = {
            "outcome": cfg.get("outcome_label", "outcome"),
            "year": cfg.get("year", 0),
            "late": scores.late,
            "late_se": scores.late_se,
            "n_obs": data.n_obs,
            "n_clusters": int(len(np.unique(data.cluster))),
            "dropped_rows": data.dropped_rows,
            "seed": seed,
            "mode": mode,
            "n_weak": int(clates.weak_flags.sum()),
            "n_floored_delta": scores.n_floored_delta,
            "nuisance_diagnostics": nuis.diagnostics,
            "residual_means": clates.diagnostics["residual_means"],
        }

        out_dir.mkdir(parents=True, exist_ok=True)
        stage = "artifacts"
        emit("results.json", lambda p: _dump_json(summary, p))
        emit("clates.csv", lambda p: _write_clates_csv(p, clates, scores.gamma))

        ci = (scores.late - Z975 * scores.late_se, scores.late + Z975 * scores.late_se)
        if analyses["histogram"]:
            hist = clate_histogram(
                clates.tau_hat, int(cfg.get("histogram_bins", 20)), scores.late, ci
            )
            emit("hist.json", lambda p: _dump_json(hist, p))
        if analyses["blp"]:
            X, names = build_design(data)
            _, cl = data.cluster_index()
            res = blp(scores.gamma, X, names, cl)
            emit("blp.json", lambda p: _dump_json(res.to_dict(), p))
        if analyses["clan"]:
            X, names = build_design(data)
            res = clan(scores.gamma, X, names)
            emit("clan.json", lambda p: _dump_json(res.to_dict(), p))
        if analyses["policy_tree"]:
            tree = learn_depth2(
                data.features, scores.gamma, data.feature_names,
                treatment_cost=float(cfg.get("treatment_cost", 0.0)),
            )
            emit("policy_tree.json", lambda p: _dump_json(tree.to_dict(), p))

        manifest = {
            "library_version": __version__,
            "backend": backend_name(),
            "params": params.to_dict(),
            "config": cfg,
            "seed": seed,
            "threads": threads,
            "analyses": analyses,
            "artifact_schemas": {
                "results": "results.json: {outcome, year, late, late_se, ...}",
                "clates": "clates.csv: tau_hat, se, gamma, weak_flag",
                "hist": "hist.json: {edges, counts, late, late_ci, zero_line, n_obs}",
                "blp": "blp.json: {coefficients: [{name, estimate, se, ci_low, ci_high}], n_obs}",
                "clan": "clan.json: {modifiers: [{name, mean_most, mean_least, diff, diff_se, ci_low, ci_high}], group_size}",
                "policy_tree": "policy_tree.json: {tree: nested nodes, value_estimate}",
            },
        }
        emit("manifest.json", lambda p: _dump_json(manifest, p))
        return summary
    except Exception as exc:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        if isinstance(exc, IvForestError):
            _die(stage, exc)
        raise


# -- subcommand handlers --------------------------------------------------


def cmd_simulate(args):
    spec_cfg = _load_json(args.spec)
    try:
        spec = DgpSpec(**spec_cfg)
        sd = generate(spec)
    except (ConfigError, TypeError) as exc:
        _die("simulate", exc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(sd.data, out / "data.csv")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_true", "complier_flag"])
        for i in range(sd.data.n_obs):
            w.writerow([repr(float(sd.tau_true[i])), int(sd.complier_flag[i])])
    _dump_json(
        {
            "late_true": sd.late_true,
            "dgp": spec.to_dict(),
            "dataset": {
                "path": "data.csv",
                "outcome": "y", "treatment": "d", "instrument": "z",
                "cluster": "cluster",
                "features": [
                    {"name": s.name, "kind": s.kind, "in_propensity": s.in_propensity}
                    for s in sd.data.feature_specs
                ],
            },
            "seed": spec.seed,
        },
        out / "ground_truth.json",
    )
    print(f"wrote {out}/data.csv ({sd.data.n_obs} rows), truth.csv, ground_truth.json")


def cmd_run(args):
    cfg = _load_json(args.config)
    try:
        seed = _require_seed(cfg, args.seed)
    except ConfigError as exc:
        _die("config", exc)
    summary = _pipeline(
        cfg, Path(args.config).parent, Path(args.out), seed, _threads(args),
        tune=args.tune,
    )
    print(json.dumps({"late": summary["late"], "late_se": summary["late_se"]}))


def cmd_fit(args):
    cfg = _load_json(args.config)
    try:
        seed = _require_seed(cfg, args.seed)
        data = _load_dataset(cfg, Path(args.config).parent)
        params = _forest_params(cfg, seed)
        nuis = fit_nuisances(data, params, n_threads=_threads(args))
        clates = predict_clates(
            data, nuis, params, mode=cfg.get("mode", "instrumental"),
            n_threads=_threads(args),
        )
    except IvForestError as exc:
        _die("fit", exc)
    clates.forest.save(args.out)
    print(f"wrote {args.out} ({clates.forest.n_trees} trees)")


def cmd_predict(args):
    cfg = _load_json(args.config)
    try:
        forest = Forest.load(args.forest)
        data_cfg = dict(cfg.get("dataset", {}))
        data_cfg["path"] = args.data
        data = _load_dataset({"dataset": data_cfg}, Path(args.config).parent)
        acc_a, acc_b, n_adm = forest.predict_moments(data.features, oob=False)
        safe_b = np.where(np.abs(acc_b) > 1e-300, acc_b, 1.0)
        tau = np.where(n_adm > 0, acc_a / safe_b, np.nan)
    except IvForestError as exc:
        _die("predict", exc)
    if args.format == "json":
        _dump_json({"tau_hat": [float(t) for t in tau]}, args.out)
    else:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tau_hat"])
            for t in tau:
                w.writerow([repr(float(t))])
    print(f"wrote {args.out} ({tau.shape[0]} predictions)")


def cmd_scores(args):
    cfg = _load_json(args.config)
    try:
        seed = _require_seed(cfg, args.seed)
    except ConfigError as exc:
        _die("config", exc)
    cfg = dict(cfg)
    cfg["analyses"] = {"blp": False, "clan": False, "policy_tree": False,
                       "histogram": False}
    summary = _pipeline(cfg, Path(args.config).parent, Path(args.out), seed,
                        _threads(args))
    print(json.dumps({"late": summary["late"], "late_se": summary["late_se"]}))


def _reanalysis_inputs(args):
    cfg = _load_json(args.config)
    data = _load_dataset(cfg, Path(args.config).parent)
    _, _, gamma, _ = _read_clates_csv(Path(args.scores) / "clates.csv")
    if gamma.shape[0] != data.n_obs:
        raise ConfigError(
            f"scores ({gamma.shape[0]} rows) do not match dataset ({data.n_obs})"
        )
    return cfg, data, gamma


def cmd_blp(args):
    try:
        cfg, data, gamma = _reanalysis_inputs(args)
        X, names = build_design(data)
        _, cl = data.cluster_index()
        res = blp(gamma, X, names, cl)
    except IvForestError as exc:
        _die("blp", exc)
    _dump_json(res.to_dict(), args.out)
    print(f"wrote {args.out}")


def cmd_clan(args):
    try:
        cfg, data, gamma = _reanalysis_inputs(args)
        X, names = build_design(data)
        res = clan(gamma, X, names)
    except IvForestError as exc:
        _die("clan", exc)
    _dump_json(res.to_dict(), args.out)
    print(f"wrote {args.out}")


def cmd_policy_tree(args):
    try:
        cfg, data, gamma = _reanalysis_inputs(args)
        tree = learn_depth2(
            data.features, gamma, data.feature_names,
            treatment_cost=args.treatment_cost,
        )
    except IvForestError as exc:
        _die("policy-tree", exc)
    _dump_json(tree.to_dict(), args.out)
    print(f"wrote {args.out}")


def cmd_report(args):
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "results.json"
        if not path.exists():
            _die("report", ConfigError(f"missing results.json in {run_dir}"))
        res = _load_json(path)
        rows.append({
            "outcome": res["outcome"], "year": res["year"],
            "late": res["late"], "late_se": res["late_se"],
        })
    if args.format == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    else:
        text = render_report(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ivforest",
        description="Instrumental causal forests: CLATEs, doubly robust LATE, "
                    "heterogeneity inference, and policy trees.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default IVFOREST_THREADS or 1)")

    p = sub.add_parser("simulate", help="generate synthetic data to CSV")
    p.add_argument("--spec", required=True, help="DGP spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="full pipeline for one (outcome, year)")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--tune", action="store_true",
                   help="tune {min_node_size, mtry, subsample_fraction} with pilot forests")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="fit and serialize the target forest")
    common(p)
    p.add_argument("--out", required=True, help="forest artifact path (.npz)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict CLATEs from a saved forest")
    common(p)
    p.add_argument("--forest", required=True)
    p.add_argument("--data", required=True, help="CSV of query rows")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("scores", help="pipeline through the doubly robust scores")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scores)

    for name, fn in (("blp", cmd_blp), ("clan", cmd_clan)):
        p = sub.add_parser(name, help=f"{name} reanalysis of stored scores")
        common(p)
        p.add_argument("--scores", required=True, help="directory with clates.csv")
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("policy-tree", help="depth-two policy tree from stored scores")
    common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--treatment-cost", type=float, default=0.0)
    p.set_defaults(func=cmd_policy_tree)

    p = sub.add_parser("report", help="appendix-style results table over run dirs")
    p.add_argument("runs", nargs="+", help="run directories with results.json")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
