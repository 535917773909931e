"""Fit and compare spatial basis models on misaligned areal layers.

Subcommands: ``simulate``, ``fit``, ``predict``, ``compare``,
``knots-sensitivity`` and ``rerun``. Every artifact-producing run writes
``run-manifest.json`` with the resolved arguments, input hashes and output
hashes; ``rerun`` replays a manifest into a new directory and checks that
every output is byte-identical.

Exit codes: 0 ok, 1 replay mismatch, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .basis import KnotSet, hybrid_basis, place_knots
from .bundles import align_to_layer, design_matrix, read_table, save_npz, sha256_file, write_csv, write_json
from .errors import ConfigError, DataError, InvalidArgumentError, NumericalError
from .evaluate import ModelMetrics, StudyReport, config_hash, dic
from .geometry import load_layer
from .model import ModelSpec, PriorSpec
from .predict import baseline_prediction_basis, build_prediction_basis, predictive_draws
from .sampler import STREAM_PREDICT, PosteriorSamples, SamplerConfig, hughes_haran_spec, run_chain, stream
from .simulate import BASELINE, PROPOSED, SimConfig, knot_sensitivity, make_dataset, replicate_seeds, run_study

log = logging.getLogger("misalign")

MANIFEST = "run-manifest.json"
UNTRACKED = {MANIFEST, "timings.json"}
PATH_ARGS = ("layer", "data", "target_layer", "target_data", "fit", "config")
MODELS = (PROPOSED, BASELINE)


# -- argument plumbing -------------------------------------------------------

def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_sampler_args(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--iters", type=int, default=5000, help="total Gibbs iterations per chain")
    g.add_argument("--burnin", type=int, default=1000)
    g.add_argument("--thin", type=int, default=1)
    g.add_argument("--chains", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--init", choices=("least-squares", "prior-draw"), default="least-squares")


def _add_model_args(p):
    g = p.add_argument_group("model")
    k = g.add_mutually_exclusive_group()
    k.add_argument("--knots", type=int, default=None, help="number of knots r")
    k.add_argument("--knot-fraction", type=float, default=0.10, help="knots as a fraction of the fit units")
    g.add_argument("--contiguity", choices=("rook", "queen", "shared-boundary"), default="rook")
    g.add_argument("--layer-id-prop", default="id", help="GeoJSON property holding unit ids")
    g.add_argument("--q", type=int, default=None, help="baseline eigenvector count (default: r)")
    g.add_argument("--prior-ig", type=float, nargs=2, default=(2.0, 1.0), metavar=("SHAPE", "RATE"),
                   help="inverse-gamma prior for sigma2, sigma2_eta and phi")
    g.add_argument("--beta-var", type=float, default=1e10)


def _add_data_args(p, y=True):
    g = p.add_argument_group("data")
    g.add_argument("--id-col", default="id")
    if y:
        g.add_argument("--y-col", default="y")
    g.add_argument("--x-cols", type=_csv_list, default=None, help="comma-separated covariate columns")
    g.add_argument("--no-intercept", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misalign", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"misalign {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model on one layer (optionally predict on a target layer)")
    p.add_argument("--layer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-layer")
    p.add_argument("--target-data")
    p.add_argument("--model", choices=MODELS, default=PROPOSED)
    p.add_argument("--save-draws", action="store_true", help="also write the full predictive draw matrix")
    p.add_argument("--out", required=True)
    _add_data_args(p)
    _add_model_args(p)
    _add_sampler_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predictive posterior on a target layer from a saved fit")
    p.add_argument("--fit", required=True, help="output directory of a previous fit")
    p.add_argument("--target-layer", required=True)
    p.add_argument("--data", required=True, help="target covariates CSV")
    p.add_argument("--id-col", default="id")
    p.add_argument("--x-cols", type=_csv_list, default=None, help="default: the fit's covariates")
    p.add_argument("--layer-id-prop", default="id")
    p.add_argument("--contiguity", choices=("rook", "queen", "shared-boundary"), default="rook")
    p.add_argument("--seed", type=int, default=None, help="default: the fit's seed")
    p.add_argument("--save-draws", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="fit several models and score them against target truth")
    p.add_argument("--layer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-layer", required=True)
    p.add_argument("--target-data", required=True)
    p.add_argument("--truth-col", default="truth")
    p.add_argument("--models", type=_csv_list, default=list(MODELS))
    p.add_argument("--out", required=True)
    _add_data_args(p)
    _add_model_args(p)
    _add_sampler_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="run the lattice simulation study")
    p.add_argument("--config", help="JSON file with simulation settings")
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--data-only", action="store_true", help="write datasets without fitting")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("knots-sensitivity", help="study RMSE as a function of the knot count")
    p.add_argument("--config")
    p.add_argument("--fractions", type=lambda s: [float(x) for x in _csv_list(s)], default=[0.05, 0.10, 0.20])
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_knots_sensitivity)

    p = sub.add_parser("rerun", help="replay a run-manifest and verify byte-identical outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


# -- shared steps ------------------------------------------------------------

def _sampler_config(a) -> SamplerConfig:
    try:
        return SamplerConfig(a.iters, a.burnin, a.thin, a.seed, a.chains, a.init)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def _priors(a) -> PriorSpec:
    shape, rate = a.prior_ig
    try:
        return PriorSpec(beta_var=a.beta_var, a_eps=shape, b_eps=rate, a_eta=shape, b_eta=rate, a_phi=shape, b_phi=rate)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_xy(a, layer, path, with_y=True, x_cols=None, intercept=None):
    x_cols = a.x_cols if x_cols is None else x_cols
    x_cols = x_cols or []
    intercept = (not a.no_intercept) if intercept is None else intercept
    cols = ([a.y_col] if with_y else []) + list(x_cols)
    table = align_to_layer(read_table(path, a.id_col, cols), layer.ids, str(path))
    X = design_matrix(table, x_cols, intercept)
    y = table[a.y_col].to_numpy(dtype=float) if with_y else None
    return X, y


def _knots(a, layer) -> KnotSet:
    try:
        return place_knots(layer, a.knot_fraction if a.knot_fraction is not None else 0.10, r=a.knots)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def _fit_model(model, layer, X, y, knots, scfg, priors, q=None):
    basis = hybrid_basis(layer, X, knots)
    if model == PROPOSED:
        spec = ModelSpec.from_hybrid(X, y, basis, priors)
    elif model == BASELINE:
        spec = hughes_haran_spec(layer, X, y, knots.r if q is None else q, priors, M=basis.M)
    else:
        raise ConfigError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
    return basis, spec, run_chain(spec, scfg)


def _target_basis(model, target, X_star, knots, q):
    if model == PROPOSED:
        return build_prediction_basis(target, X_star, knots, reference=knots).Lam
    return baseline_prediction_basis(target, X_star, q)


def _write_predictions(pred, out: Path, save_draws: bool, name="predictions.csv") -> list[Path]:
    paths = [write_csv(out / name, pred.summary())]
    if save_draws:
        frame = pd.DataFrame(pred.draws, columns=pred.ids)
        paths.append(write_csv(out / name.replace(".csv", "_draws.csv"), frame))
    return paths


def _summary_json(samples: PosteriorSamples, spec: ModelSpec, y) -> dict:
    s = samples.summary()
    d = dic(samples, y)
    return {
        "model": samples.model,
        "parameters": {k: {c: float(v) for c, v in row.items()} for k, row in s.iterrows()},
        "point_estimates": {
            name: {"mean": float(np.mean(samples.pooled(name))), "median": float(np.median(samples.pooled(name)))}
            for name in ("sigma2", "sigma2_eta", "phi")
        },
        "dic": {"dic": d.dic, "dbar": d.dbar, "pd": d.pd},
        "acceptance": samples.acceptance,
        "draws": {"chains": samples.n_chains, "per_chain": samples.n_draws},
        "dims": {"n": spec.n, "p": spec.p, "r": spec.r},
    }


def save_fit(path, samples: PosteriorSamples, knots: KnotSet, meta: dict) -> Path:
    blocks = {b: getattr(samples, b) for b in PosteriorSamples.BLOCKS}
    return save_npz(path, knots=knots.knots, tau=np.array(knots.tau), meta=np.array(json.dumps(meta, sort_keys=True)), **blocks)


def load_fit(fit_dir) -> tuple[PosteriorSamples, KnotSet, dict]:
    path = Path(fit_dir) / "fit.npz"
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            blocks = {b: z[b] for b in PosteriorSamples.BLOCKS}
            knots = KnotSet(z["knots"], float(z["tau"]))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read saved fit {path}: {exc}") from exc
    return PosteriorSamples(meta["model"], **blocks), knots, meta


# -- manifest ----------------------------------------------------------------

def _input_hashes(args: dict) -> dict:
    out = {}
    for key in PATH_ARGS:
        p = args.get(key)
        if not p:
            continue
        path = Path(p)
        target = path / "fit.npz" if path.is_dir() else path
        out[key] = {"path": str(path), "sha256": sha256_file(target)}
    return out


def _resolved_args(a) -> dict:
    d = {k: v for k, v in vars(a).items() if k not in ("func", "out", "verbose")}
    for key in PATH_ARGS:
        if d.get(key):
            d[key] = str(Path(d[key]).resolve())
    return d


def _write_manifest(a, out: Path, command: str) -> Path:
    args = _resolved_args(a)
    outputs = {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name not in UNTRACKED
    }
    manifest = {
        "tool": "misalign",
        "version": __version__,
        "command": command,
        "args": args,
        "config_hash": config_hash(args),
        "inputs": _input_hashes(args),
        "outputs": outputs,
    }
    return write_json(out / MANIFEST, manifest)


# -- subcommands -------------------------------------------------------------

def cmd_fit(a) -> int:
    out = _outdir(a.out)
    layer = load_layer(a.layer, id_property=a.layer_id_prop, rule=a.contiguity)
    X, y = _load_xy(a, layer, a.data)
    scfg, priors, knots = _sampler_config(a), _priors(a), _knots(a, layer)
    basis, spec, samples = _fit_model(a.model, layer, X, y, knots, scfg, priors, a.q)

    write_csv(out / "posterior_draws.csv", samples.draws_frame())
    fitted = pd.DataFrame({"id": layer.ids})
    mu = samples.pooled("mu")
    q = np.quantile(mu, (0.025, 0.5, 0.975), axis=0)
    fitted = fitted.assign(mean=mu.mean(axis=0), sd=mu.std(axis=0, ddof=1), **{"q2.5": q[0], "q50": q[1], "q97.5": q[2]})
    write_csv(out / "fitted_mu.csv", fitted)
    write_json(out / "summary.json", _summary_json(samples, spec, y))
    write_json(out / "layer.json", layer.to_manifest())
    basis.to_npz(out / "basis.npz")
    meta = {
        "model": samples.model,
        "x_cols": a.x_cols or [],
        "intercept": not a.no_intercept,
        "q": spec.r,
        "seed": a.seed,
        "sampler": {"iterations": a.iters, "burnin": a.burnin, "thin": a.thin, "chains": a.chains},
    }
    save_fit(out / "fit.npz", samples, knots, meta)

    if a.target_layer:
        if not a.target_data:
            raise ConfigError("--target-layer needs --target-data with the target covariates")
        target = load_layer(a.target_layer, id_property=a.layer_id_prop, rule=a.contiguity)
        X_star, _ = _load_xy(a, target, a.target_data, with_y=False)
        lam_star = _target_basis(a.model, target, X_star, knots, spec.r)
        pred = predictive_draws(samples, X_star, lam_star, stream(a.seed, STREAM_PREDICT), ids=target.ids)
        _write_predictions(pred, out, a.save_draws)

    print(samples.summary().loc[["sigma2", "sigma2_eta", "phi"]].to_string())
    _write_manifest(a, out, "fit")
    return 0


def cmd_predict(a) -> int:
    out = _outdir(a.out)
    samples, knots, meta = load_fit(a.fit)
    target = load_layer(a.target_layer, id_property=a.layer_id_prop, rule=a.contiguity)
    x_cols = a.x_cols if a.x_cols is not None else meta["x_cols"]
    table = align_to_layer(read_table(a.data, a.id_col, x_cols), target.ids, str(a.data))
    X_star = design_matrix(table, x_cols, meta["intercept"])
    lam_star = _target_basis(meta["model"], target, X_star, knots, meta["q"])
    seed = meta["seed"] if a.seed is None else a.seed
    pred = predictive_draws(samples, X_star, lam_star, stream(seed, STREAM_PREDICT), ids=target.ids)
    _write_predictions(pred, out, a.save_draws)
    print(pred.summary().head().to_string(index=False))
    _write_manifest(a, out, "predict")
    return 0


def cmd_compare(a) -> int:
    out = _outdir(a.out)
    layer = load_layer(a.layer, id_property=a.layer_id_prop, rule=a.contiguity)
    target = load_layer(a.target_layer, id_property=a.layer_id_prop, rule=a.contiguity)
    X, y = _load_xy(a, layer, a.data)
    x_cols = a.x_cols or []
    table = align_to_layer(read_table(a.target_data, a.id_col, [a.truth_col, *x_cols]), target.ids, str(a.target_data))
    X_star = design_matrix(table, x_cols, not a.no_intercept)
    truth = table[a.truth_col].to_numpy(dtype=float)
    scfg, priors, knots = _sampler_config(a), _priors(a), _knots(a, layer)

    metrics = {}
    for k, model in enumerate(a.models):
        _, spec, samples = _fit_model(model, layer, X, y, knots, scfg, priors, a.q)
        lam_star = _target_basis(model, target, X_star, knots, spec.r)
        pred = predictive_draws(samples, X_star, lam_star, stream(a.seed, STREAM_PREDICT), ids=target.ids)
        label = model if model not in metrics else f"{model}#{k}"
        metrics[label] = ModelMetrics.from_results(pred, truth, dic(samples, y))
        _write_predictions(pred, out, False, name=f"predictions_{label.replace('#', '_')}.csv")
    report = StudyReport.from_replicates([metrics], {"config": _resolved_args(a), "seeds": [a.seed]})
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_table() + "\n")
    print(report.to_table())
    _write_manifest(a, out, "compare")
    return 0


def _sim_config(a) -> SimConfig:
    try:
        cfg = SimConfig.from_json(a.config) if a.config else SimConfig()
        overrides = {
            k: v
            for k, v in (("replications", a.replications), ("seed", a.seed), ("iterations", a.iters), ("burnin", a.burnin))
            if v is not None
        }
        return SimConfig.from_dict({**cfg.to_dict(), **overrides})
    except (OSError, json.JSONDecodeError, TypeError, InvalidArgumentError) as exc:
        raise ConfigError(f"bad simulation config: {exc}") from exc


def cmd_simulate(a) -> int:
    out = _outdir(a.out)
    cfg = _sim_config(a)
    write_json(out / "config.json", cfg.to_dict())
    for k in range(cfg.replications):
        rng, _ = replicate_seeds(cfg, k)
        make_dataset(cfg, rng).write(out / f"replicate_{k:03d}")
    if not a.data_only:
        report = run_study(cfg)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.txt").write_text(report.to_table() + "\n")
        print(report.to_table())
        print(
            f"proposed beats baseline: RMSE in {report.wins(PROPOSED, BASELINE, 'rmse_mean')}/{cfg.replications}, "
            f"DIC in {report.wins(PROPOSED, BASELINE, 'dic')}/{cfg.replications} replications"
        )
    _write_manifest(a, out, "simulate")
    return 0


def cmd_knots_sensitivity(a) -> int:
    out = _outdir(a.out)
    cfg = _sim_config(a)
    for f in a.fractions:
        if not (0 < f <= 1):
            raise ConfigError(f"knot fraction must be in (0, 1], got {f}")
    table, runtimes = knot_sensitivity(cfg, a.fractions)
    write_csv(out / "sensitivity.csv", table)
    write_json(out / "timings.json", {"fractions": a.fractions, "seconds": runtimes})
    shown = table.assign(runtime_s=np.round(runtimes, 2))
    print(shown.to_string(index=False))
    _write_manifest(a, out, "knots-sensitivity")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "knots-sensitivity": cmd_knots_sensitivity,
}


def cmd_rerun(a) -> int:
    try:
        manifest = json.loads(Path(a.manifest).read_text())
        command, args = manifest["command"], dict(manifest["args"])
        handler = COMMANDS[command]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"unusable manifest {a.manifest}: {exc}") from exc
    for key, rec in manifest.get("inputs", {}).items():
        path = Path(rec["path"])
        target = path / "fit.npz" if path.is_dir() else path
        if not target.exists() or sha256_file(target) != rec["sha256"]:
            raise DataError(f"input {key!r} ({path}) is missing or changed since the recorded run")
    out = Path(a.out)
    if out.resolve() == Path(a.manifest).resolve().parent:
        raise ConfigError("rerun output directory must differ from the original run")
    ns = argparse.Namespace(**args, out=str(out), verbose=a.verbose)
    handler(ns)
    fresh = json.loads((out / MANIFEST).read_text())["outputs"]
    recorded = manifest["outputs"]
    ok = True
    for name in sorted(set(recorded) | set(fresh)):
        same = recorded.get(name) == fresh.get(name)
        ok &= same
        print(f"{'PASS' if same else 'FAIL'}  {name}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.func(a)
    except ConfigError as exc:
        print(f"misalign: configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"misalign: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, InvalidArgumentError) as exc:
        print(f"misalign: data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
