"""Command-line entry point: ``python -m spatial_restore <subcommand> ...``.

Exit codes: 0 success, 2 input or configuration error, 3 convergence
warning (some R-hat above 1.1; outputs are still written), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    AdjacencyGraph,
    DataError,
    Dataset,
    default_scaling_policy,
    descriptive_stats,
    event_time_histogram,
    parse_adjacency,
    parse_dataset,
    parse_outage_series,
    restoration_interval,
    scale_covariates,
    dataset_to_csv,
)
from .gaft import GaftParams, ModelSpec, PriorConfig, simulate_dataset
from .mcmc import McmcConfig, export_traces, run_mcmc
from .report import format_table, summarize_fit
from .spatial import (
    collinearity_screen,
    local_moran_analysis,
    pearson_matrix,
    permutation_test_global,
    weights,
)

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
RHAT_LIMIT = 1.1
SIM_DISTRIBUTIONS = ("normal", "uniform", "poisson", "gamma", "lognormal", "exponential", "beta")


class ConfigError(ValueError):
    pass


def _read(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_dataset(path) -> Dataset:
    return parse_dataset(_read(path))


def _graph_for(dataset: Dataset, adjacency_path):
    """Adjacency restricted to the dataset's units, in dataset order."""
    g = parse_adjacency(_read(adjacency_path))
    missing = [u for u in dataset.unit_ids if u not in g.index]
    if missing:
        raise DataError(f"units missing from adjacency file: {missing[:5]}")
    sub = g.restrict(dataset.unit_ids)
    return AdjacencyGraph(tuple(dataset.unit_ids), sub.edges)


# --------------------------------------------------------------------------- prepare


def cmd_prepare(args) -> int:
    series = parse_outage_series(_read(args.series))
    rows = ["unit_id,event_time_days,censored"]
    for uid in sorted(series):
        res = restoration_interval(series[uid], args.threshold)
        if res is None:
            print(f"excluded {uid}: outage never reached {args.threshold:g}%", file=sys.stderr)
            continue
        days, restored = res
        if days <= 0:
            print(f"excluded {uid}: zero-length outage", file=sys.stderr)
            continue
        if args.round_days:
            days = max(float(round(days)), 1.0)
        rows.append(f"{uid},{days!r},{0 if restored else 1}")
    text = "\n".join(rows) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- moran


def inject_geojson(geo: dict, props: dict[str, dict], id_field: str = "unit_id") -> dict:
    """Copy of a FeatureCollection with per-unit properties merged in; geometry untouched."""
    if geo.get("type") != "FeatureCollection":
        raise DataError("GeoJSON must be a FeatureCollection")
    feats = geo.get("features", [])
    seen = set()
    out_feats = []
    for f in feats:
        fprops = f.get("properties") or {}
        uid = fprops.get(id_field, f.get("id"))
        uid = None if uid is None else str(uid)
        if uid not in props:
            raise DataError(f"GeoJSON feature {uid!r} has no matching unit in the dataset")
        seen.add(uid)
        new = dict(f)
        new["properties"] = {**fprops, **props[uid]}
        out_feats.append(new)
    missing = sorted(set(props) - seen)
    if missing:
        raise DataError(f"dataset units without a GeoJSON feature: {missing[:5]}")
    out = dict(geo)
    out["features"] = out_feats
    return out


def cmd_moran(args) -> int:
    ds = _load_dataset(args.data)
    g = _graph_for(ds, args.adjacency)
    W = weights(g, args.weights)
    x = ds.column(args.variable)
    glob = permutation_test_global(x, W, n_perm=args.n_perm, seed=args.seed)
    loc = local_moran_analysis(x, W, n_perm=args.n_perm, seed=args.seed, alpha=args.alpha)
    out = Path(args.out_dir)
    payload = {**glob.to_dict(), "variable": args.variable, "weights": args.weights, "n_units": g.m}
    _write(out / "moran_global.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit_id", "local_I", "pseudo_p", "label"])
    for uid, I, p, lab in zip(ds.unit_ids, loc.I, loc.pseudo_p, loc.labels):
        w.writerow([uid, repr(float(I)), repr(float(p)), lab])
    _write(out / "moran_local.csv", buf.getvalue())
    if args.geojson:
        geo = json.loads(_read(args.geojson))
        props = {uid: {"restoration_days": float(t), "lisa_label": lab, "lisa_p": float(p)}
                 for uid, t, lab, p in zip(ds.unit_ids, ds.event_times, loc.labels, loc.pseudo_p)}
        merged = inject_geojson(geo, props, args.geojson_id_field)
        _write(out / "moran_lisa.geojson", json.dumps(merged) + "\n")
    print(f"global I = {glob.I:.4f} (pseudo p = {glob.pseudo_p:.4g}, {glob.n_permutations} permutations)")
    return EXIT_OK


# --------------------------------------------------------------------------- fit

FIT_KEYS = ("frailty", "covariates", "baseline_covariates", "tree_depth", "median_zero", "quick",
            "scale_income", "priors", "mcmc", "seed")


def _fit_settings(args) -> dict:
    """Config file values overlaid by any flags given on the command line."""
    cfg = {}
    if args.config:
        cfg = json.loads(_read(args.config))
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(cfg) - set(FIT_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    flags = {"frailty": args.frailty, "tree_depth": args.depth, "seed": args.seed,
             "quick": True if args.quick else None, "scale_income": True if args.scale_income else None,
             "covariates": args.covariates.split(",") if args.covariates else None,
             "baseline_covariates": args.baseline_covariates.split(",") if args.baseline_covariates else None}
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    mcmc = dict(cfg.get("mcmc", {}))
    for k, v in (("n_chains", args.chains), ("n_iter", args.iterations), ("burn_in", args.burn_in),
                 ("thin", args.thin)):
        if v is not None:
            mcmc[k] = v
    cfg["mcmc"] = mcmc
    cfg.setdefault("frailty", "icar")
    return cfg


def _mcmc_config(cfg: dict) -> McmcConfig:
    m = dict(cfg["mcmc"])
    if "seed" in cfg:
        m["seed"] = int(cfg["seed"])
    allowed = set(McmcConfig.__dataclass_fields__)
    unknown = set(m) - allowed
    if unknown:
        raise ConfigError(f"unknown mcmc keys: {sorted(unknown)}")
    if "fixed" in m:
        m["fixed"] = tuple(m["fixed"])
    return McmcConfig.quick(**m) if cfg.get("quick") else McmcConfig(**m)


def cmd_fit(args) -> int:
    cfg = _fit_settings(args)
    ds = _load_dataset(args.data)
    if cfg.get("covariates"):
        ds = parse_dataset(_read(args.data), cfg["covariates"])
    scaling = None
    if cfg.get("scale_income"):
        policy = default_scaling_policy(ds.covariate_names)
        ds, scaling = scale_covariates(ds, policy, {n: "10000" for n in policy})
    frailty = cfg["frailty"]
    if frailty not in ("none", "icar"):
        raise ConfigError("frailty must be 'none' or 'icar'")
    graph = None
    if frailty == "icar":
        if not args.adjacency:
            raise ConfigError("--adjacency is required with --frailty icar")
        graph = _graph_for(ds, args.adjacency)
    spec = ModelSpec(ds.covariate_names, cfg.get("baseline_covariates"), frailty,
                     int(cfg.get("tree_depth", 4)), median_zero=bool(cfg.get("median_zero", True)))
    priors = PriorConfig.from_dict(cfg.get("priors", {}))
    mc = _mcmc_config(cfg)
    if args.progress:
        mc = McmcConfig(**{**mc.to_dict(), "fixed": mc.fixed, "progress_every": args.progress})
    samples = run_mcmc(ds, graph, spec, priors, mc)
    summary = summarize_fit(samples, ds, graph, scaling)
    out = Path(args.out_dir)
    _write(out / "summary.json", summary.to_json())
    _write(out / "table.txt", format_table(summary))
    export_traces(samples, out / "traces")
    sys.stdout.write(format_table(summary))
    bad = {k: v for k, v in summary.rhat.items() if not v <= RHAT_LIMIT}
    if bad:
        print("convergence warning: R-hat above %.2f for %s" % (RHAT_LIMIT, ", ".join(sorted(bad))),
              file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


# --------------------------------------------------------------------------- simulate


def _covariate_generator(spec_cov: dict, names):
    for name in names:
        d = spec_cov.get(name)
        if d is None:
            raise ConfigError(f"no generator for covariate {name!r}")
        if d.get("dist") not in SIM_DISTRIBUTIONS:
            raise ConfigError(f"covariate {name!r}: dist must be one of {SIM_DISTRIBUTIONS}")

    def gen(rng, n):
        cols = [getattr(rng, spec_cov[nm]["dist"])(*spec_cov[nm].get("args", []), size=n) for nm in names]
        return np.column_stack(cols).astype(float)

    return gen


def cmd_simulate(args) -> int:
    doc = json.loads(_read(args.spec))
    try:
        spec = ModelSpec.from_dict(doc["model"])
        params = GaftParams.from_dict(doc["params"])
        gen = _covariate_generator(doc["covariates"], spec.covariate_names)
    except KeyError as e:
        raise ConfigError(f"simulation spec is missing {e}") from None
    graph = parse_adjacency(_read(args.adjacency)) if args.adjacency else None
    if spec.frailty_mode == "icar" and graph is None:
        raise ConfigError("--adjacency is required for ICAR simulation")
    resample = bool(doc.get("resample_frailty", params.v.size == 0))
    if resample and spec.frailty_mode == "icar":
        params = GaftParams(params.beta, np.zeros(graph.m), params.tau2, params.sigma2, params.alpha, params.tree)
    n = args.n if args.n is not None else doc.get("n")
    ds = simulate_dataset(spec, params, graph, gen, n=n, seed=args.seed,
                          censor_time=doc.get("censor_time"), resample_frailty=resample)
    out = Path(args.out_dir)
    _write(out / "dataset.csv", dataset_to_csv(ds))
    truth = params.to_dict()
    if resample and spec.frailty_mode == "icar":
        truth["v"] = None  # drawn inside the simulator; not recoverable from the seed alone
    _write(out / "true_params.json", json.dumps({"model": spec.to_dict(), "params": truth, "seed": args.seed},
                                                indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------- correlate


def cmd_correlate(args) -> int:
    ds = _load_dataset(args.data)
    cm = pearson_matrix(ds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable"] + list(cm.names))
    for name, row in zip(cm.names, cm.r):
        w.writerow([name] + ["" if np.isnan(x) else repr(float(x)) for x in row])
    _write(Path(args.out), buf.getvalue())
    for a, b in cm.undefined:
        print(f"advisory: correlation of {a} and {b} is undefined (constant column)", file=sys.stderr)
    flagged = collinearity_screen(cm, args.threshold)
    for a, b, r in flagged:
        print(f"{a},{b},{r:.4f}")
    if flagged:
        print(f"advisory: {len(flagged)} pair(s) with |r| > {args.threshold:g}; "
              "keep one variable of each collinear group before fitting", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------- report


def cmd_report(args) -> int:
    ds = _load_dataset(args.data)
    out = Path(args.out_dir)
    _write(out / "descriptive_stats.json", json.dumps(descriptive_stats(ds), indent=2, sort_keys=True) + "\n")
    ds_hist = ds
    if args.round_days:
        ds_hist = Dataset(tuple(r.__class__(r.unit_id, max(float(round(r.event_time)), 1.0), r.censored,
                                            r.covariates) for r in ds.records), ds.covariate_names, ds.scaling)
    lines = ["days,count"] + [f"{d!r},{c}" for d, c in event_time_histogram(ds_hist)]
    _write(out / "histogram.csv", "\n".join(lines) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatial-restore", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="restoration times from outage percentage series")
    sp.add_argument("--series", required=True)
    sp.add_argument("--threshold", type=float, default=20.0)
    sp.add_argument("--round-days", action="store_true", help="round durations to whole days (min 1)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("moran", help="global and local Moran's I")
    sp.add_argument("--data", required=True)
    sp.add_argument("--adjacency", required=True)
    sp.add_argument("--variable", default="event_time_days")
    sp.add_argument("--weights", choices=("row_standardized", "binary"), default="row_standardized")
    sp.add_argument("--n-perm", type=int, default=999)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--geojson")
    sp.add_argument("--geojson-id-field", default="unit_id")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_moran)

    sp = sub.add_parser("fit", help="fit the GAFT model by MCMC")
    sp.add_argument("--data", required=True)
    sp.add_argument("--adjacency")
    sp.add_argument("--frailty", choices=("none", "icar"))
    sp.add_argument("--config", help="JSON file; flags override its values")
    sp.add_argument("--quick", action="store_true", help="4 chains x 2000 iterations")
    sp.add_argument("--depth", type=int)
    sp.add_argument("--covariates")
    sp.add_argument("--baseline-covariates")
    sp.add_argument("--scale-income", action="store_true")
    sp.add_argument("--chains", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--burn-in", type=int)
    sp.add_argument("--thin", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--progress", type=int, default=0, help="progress line every N sweeps")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("simulate", help="synthetic dataset from a model spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--adjacency")
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("correlate", help="Pearson matrix and collinearity flags")
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=float, default=0.7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_correlate)

    sp = sub.add_parser("report", help="descriptive statistics and event-time histogram")
    sp.add_argument("--data", required=True)
    sp.add_argument("--round-days", action="store_true")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT if _is_input(e, args) else EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ConfigError, ValueError, KeyError, json.JSONDecodeError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


def _is_input(err: OSError, args) -> bool:
    """Missing or unreadable input files are input errors; failures writing outputs are I/O errors."""
    name = getattr(err, "filename", None)
    if name is None:
        return False
    inputs = {getattr(args, k, None) for k in ("series", "data", "adjacency", "geojson", "config", "spec")}
    return str(name) in {str(x) for x in inputs if x}


if __name__ == "__main__":
    sys.exit(main())
