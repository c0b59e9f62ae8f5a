"""Command-line interface: ``nmfrlct <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__, coefficients, config, kernels
from .gibbs import GibbsConfig, read_draws_jsonl, run_chain, write_draws_jsonl
from .harness import (ExperimentConfig, default_jobs, default_truth, run_experiment,
                      write_experiment)
from .model import (DomainError, FactorPair, Hyperparameters, ModelDims, NumericalError,
                    generate_dataset, read_dataset_jsonl, read_matrix_csv, write_dataset_jsonl,
                    write_matrix_csv)
from .variational import VBConfig, fit

log = logging.getLogger("nmfrlct")

# (flag, section, key, help)
MODEL_FLAGS = [
    ("--M", "model", "M", "number of rows"),
    ("--N", "model", "N", "number of columns"),
    ("--H", "model", "H", "inner dimension of the model"),
    ("--H0", "model", "H0", "true non-negative rank"),
]
PRIOR_FLAGS = [
    ("--phi-u", "prior", "phi_u", "gamma shape for U (decimal or fraction, e.g. 1/4)"),
    ("--theta-u", "prior", "theta_u", "gamma rate for U"),
    ("--phi-v", "prior", "phi_v", "gamma shape for V"),
    ("--theta-v", "prior", "theta_v", "gamma rate for V"),
]
TRUTH_FLAGS = [
    ("--truth-u", "truth", "u", "CSV file with the true U0 (M x H0)"),
    ("--truth-v", "truth", "v", "CSV file with the true V0 (H0 x N)"),
    ("--truth-seed", "truth", "seed", "seed for drawing U0, V0 when no files are given"),
    ("--truth-low", "truth", "low", "lower end of the uniform truth entries"),
    ("--truth-high", "truth", "high", "upper end of the uniform truth entries"),
]
GIBBS_FLAGS = [
    ("--burn-in", "gibbs", "burn_in", "burn-in sweeps"),
    ("--thin", "gibbs", "thin", "thinning stride"),
    ("--K", "gibbs", "K", "number of retained draws"),
]
VB_FLAGS = [
    ("--max-iters", "vb", "max_iters", "maximum coordinate passes per restart"),
    ("--tol", "vb", "tol", "relative free-energy decrease threshold"),
    ("--restarts", "vb", "restarts", "random restarts; the lowest free energy wins"),
    ("--vb-seed", "vb", "seed", "seed for the VB initialisations"),
]


def _add(parser, flags):
    for flag, section, key, help_ in flags:
        parser.add_argument(flag, dest=f"{section}.{key}", default=None, metavar=key.upper(), help=help_)


def _common(parser, with_out=True):
    parser.add_argument("--config", help="INI file with [model], [prior], [truth], [data], "
                                         "[gibbs], [experiment], [vb], [select] sections")
    parser.add_argument("--manifest", help="re-run exactly the configuration recorded in a manifest")
    if with_out:
        parser.add_argument("--out", help="output directory (env NMFRLCT_OUTDIR)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmfrlct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"nmfrlct {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate count data from true factors")
    _common(g)
    _add(g, MODEL_FLAGS + TRUTH_FLAGS)
    _add(g, [("--n", "data", "n", "number of observations"),
             ("--seed", "data", "seed", "data seed")])

    s = sub.add_parser("gibbs", help="sample the posterior by Gibbs sampling")
    _common(s)
    _add(s, MODEL_FLAGS + PRIOR_FLAGS + GIBBS_FLAGS)
    _add(s, [("--data", "data", "path", "dataset JSON-lines file"),
             ("--seed", "gibbs", "seed", "chain seed"),
             ("--draws", "gibbs", "draws",
              "'retain' writes every draw to draws.jsonl; 'summary' keeps posterior means only")])

    v = sub.add_parser("vb", help="fit the variational posterior")
    _common(v)
    _add(v, MODEL_FLAGS + PRIOR_FLAGS + VB_FLAGS)
    _add(v, [("--data", "data", "path", "dataset JSON-lines file")])

    c = sub.add_parser("coefficients", help="print the closed-form learning coefficients")
    _common(c)
    _add(c, MODEL_FLAGS + PRIOR_FLAGS)

    e = sub.add_parser("experiment", help="replicated learning-coefficient estimate")
    _common(e)
    e.add_argument("--preset", choices=sorted(config.PRESETS), help="bundled reference-grid cell (shape phi and sample size n)")
    e.add_argument("--jobs", type=int, default=None,
                   help="parallel replicates (env NMFRLCT_JOBS; default: CPU count)")
    _add(e, MODEL_FLAGS + PRIOR_FLAGS + TRUTH_FLAGS + GIBBS_FLAGS)
    _add(e, [("--n", "data", "n", "training sample size"),
             ("--n-test", "data", "n_test", "test sample size (default 100 n)"),
             ("--D", "experiment", "D", "number of replicates"),
             ("--seed", "experiment", "master_seed", "master seed")])

    r = sub.add_parser("select", help="choose the rank by the corrected variational free energy")
    _common(r)
    _add(r, MODEL_FLAGS + PRIOR_FLAGS + VB_FLAGS)
    _add(r, [("--data", "data", "path", "dataset JSON-lines file"),
             ("--ranks", "select", "ranks", "candidate ranks, e.g. '0 1 2' (default 0..H)")])
    return p


def _flags(args) -> dict:
    out = {}
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            out.setdefault(section, {})[key] = value
    return out


# object builders ------------------------------------------------------------

def _dims(cfg) -> ModelDims:
    m = cfg["model"]
    return ModelDims(m["M"], m["N"], m["H"], m["H0"])


def _hyper(cfg) -> Hyperparameters:
    return Hyperparameters(**cfg["prior"])


def _truth(cfg, dims) -> FactorPair:
    t = cfg["truth"]
    if t["u"] or t["v"]:
        if not (t["u"] and t["v"]):
            raise config.ConfigError("give both --truth-u and --truth-v")
        truth = FactorPair(read_matrix_csv(t["u"]), read_matrix_csv(t["v"]))
    else:
        truth = default_truth(dims, t["seed"], t["low"], t["high"])
    truth.check_dims(dims, inner=dims.H0)
    return truth


def _data(cfg, dims):
    path = cfg["data"]["path"]
    if not path:
        raise config.ConfigError("a dataset is required (--data or [data] path)")
    data = read_dataset_jsonl(path)
    if data.shape != (dims.M, dims.N):
        raise config.ConfigError(f"{path}: matrices are {data.shape}, expected ({dims.M}, {dims.N})")
    return data


def _dump(path, doc):
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# subcommands ----------------------------------------------------------------

def cmd_generate(cfg, out):
    dims = _dims(cfg)
    truth = _truth(cfg, dims)
    data = generate_dataset(truth, cfg["data"]["n"], cfg["data"]["seed"])
    paths = [os.path.join(out, f) for f in ("data.jsonl", "truth_U.csv", "truth_V.csv")]
    write_dataset_jsonl(paths[0], data)
    write_matrix_csv(paths[1], truth.U)
    write_matrix_csv(paths[2], truth.V)
    return paths


def cmd_gibbs(cfg, out):
    dims, hyper = _dims(cfg), _hyper(cfg)
    data = _data(cfg, dims)
    g = cfg["gibbs"]
    draws = run_chain(data, hyper, dims, GibbsConfig(g["burn_in"], g["thin"], g["K"], g["seed"]))
    if g["draws"] == "retain":
        path = os.path.join(out, "draws.jsonl")
        write_draws_jsonl(path, draws)
    elif g["draws"] == "summary":
        path = os.path.join(out, "posterior_summary.json")
        ll = draws.loglik(data).sum(axis=0)
        _dump(path, {"K": draws.K, "mean_U": draws.U.mean(axis=0).tolist(),
                     "mean_V": draws.V.mean(axis=0).tolist(),
                     "mean_rate": draws.rates().mean(axis=0).tolist(),
                     "mean_loglik": float(ll.mean()), "sd_loglik": float(ll.std())})
    else:
        raise config.ConfigError(f"[gibbs] draws: expected 'retain' or 'summary', got {g['draws']!r}")
    return [path]


def _vb_cfg(cfg) -> VBConfig:
    v = cfg["vb"]
    return VBConfig(v["max_iters"], v["tol"], v["seed"], v["restarts"])


def cmd_vb(cfg, out):
    dims, hyper = _dims(cfg), _hyper(cfg)
    res = fit(_data(cfg, dims), hyper, dims, _vb_cfg(cfg))
    path = os.path.join(out, "vb_fit.json")
    with open(path, "w") as fh:
        fh.write(res.to_json() + "\n")
    log.info("variational free energy %.10g after %d passes", res.free_energy, len(res.trajectory) - 1)
    return [path]


def cmd_coefficients(cfg, out):
    rep = coefficients.report(_dims(cfg), _hyper(cfg))
    print(rep.table())
    print(rep.to_json())
    if out is None:
        return []
    path = os.path.join(out, "coefficients.json")
    with open(path, "w") as fh:
        fh.write(rep.to_json() + "\n")
    return [path]


def cmd_experiment(cfg, out, jobs=None):
    dims, hyper = _dims(cfg), _hyper(cfg)
    truth = _truth(cfg, dims)
    g = cfg["gibbs"]
    exp = ExperimentConfig(dims, hyper, truth, cfg["data"]["n"], cfg["data"]["n_test"],
                           cfg["experiment"]["D"], GibbsConfig(g["burn_in"], g["thin"], g["K"]),
                           cfg["experiment"]["master_seed"])
    write_matrix_csv(os.path.join(out, "truth_U.csv"), truth.U)
    write_matrix_csv(os.path.join(out, "truth_V.csv"), truth.V)
    result = run_experiment(exp, jobs=jobs)
    write_experiment(result, out)
    with open(os.path.join(out, "timings.csv"), "w") as fh:
        fh.write("replicate,seconds\n")
        for d, secs in enumerate(result.wall_clock):
            fh.write(f"{d},{secs:.6f}\n")
    sys.stdout.write(result.summary())
    return [os.path.join(out, f) for f in
            ("truth_U.csv", "truth_V.csv", "result.json", "replicates.csv", "summary.txt", "timings.csv")]


def cmd_select(cfg, out):
    dims, hyper = _dims(cfg), _hyper(cfg)
    data = _data(cfg, dims)
    ranks = cfg["select"]["ranks"] or list(range(dims.H + 1))
    if any(r < 0 or r > dims.H for r in ranks):
        raise config.ConfigError(f"[select] ranks must lie in 0..{dims.H}")
    free = {}
    for r in sorted(set(ranks)):
        if r == 0:
            # empty model: all rates are zero, so any positive count is impossible
            free[r] = math.inf if data.observations.any() else 0.0
        else:
            free[r] = fit(data, hyper, ModelDims(dims.M, dims.N, r, min(dims.H0, r)),
                          _vb_cfg(cfg)).free_energy
    chosen = coefficients.select_rank(free, dims, hyper, data.n)
    logn = math.log(data.n)
    rows = []
    for r, F in free.items():
        gap = coefficients.lambda_gap_lower(ModelDims(dims.M, dims.N, dims.H, r), hyper,
                                            allow_zero_rank=True)
        rows.append({"rank": r, "vb_free_energy": None if math.isinf(F) else F,
                     "gap_lower": str(gap), "score": None if math.isinf(F) else F - float(gap) * logn})
    path = os.path.join(out, "selection.json")
    _dump(path, {"n": data.n, "selected": chosen, "candidates": rows})
    print(f"selected rank: {chosen}")
    return [path]


COMMANDS = {
    "generate": cmd_generate, "gibbs": cmd_gibbs, "vb": cmd_vb,
    "coefficients": cmd_coefficients, "experiment": cmd_experiment, "select": cmd_select,
}

# artifacts not expected to reproduce byte for byte
NONDETERMINISTIC = {"manifest.json", "timings.csv"}


def _seeds(cfg) -> dict:
    return {"data": cfg["data"]["seed"], "truth": cfg["truth"]["seed"], "gibbs": cfg["gibbs"]["seed"],
            "experiment": cfg["experiment"]["master_seed"], "vb": cfg["vb"]["seed"]}


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def run(args) -> int:
    if args.manifest:
        with open(args.manifest) as fh:
            man = json.load(fh)
        if man.get("subcommand") != args.command:
            raise config.ConfigError(f"{args.manifest} records '{man.get('subcommand')}', "
                                     f"not '{args.command}'")
        cfg = config.merge(config.DEFAULTS, man["config"])
        out = args.out or man.get("outdir")
    else:
        preset = getattr(args, "preset", None)
        cfg = config.resolve(preset, args.config, _flags(args))
        out = args.out or os.environ.get("NMFRLCT_OUTDIR")
    if out is None and args.command != "coefficients":
        out = "."
    manifest = None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        manifest = {"subcommand": args.command, "config": cfg, "seeds": _seeds(cfg),
                    "version": __version__, "backend": kernels.BACKEND, "outdir": out,
                    "started": _now(), "artifacts": []}
        _dump(os.path.join(out, "manifest.json"), manifest)
    if args.command == "experiment":
        jobs = args.jobs if getattr(args, "jobs", None) else default_jobs()
        paths = cmd_experiment(cfg, out, jobs)
    else:
        paths = COMMANDS[args.command](cfg, out)
    if manifest is not None:
        manifest["artifacts"] = [os.path.basename(p) for p in paths]
        manifest["finished"] = _now()
        _dump(os.path.join(out, "manifest.json"), manifest)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except NumericalError as exc:
        print(f"nmfrlct: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DomainError, OSError, ValueError, KeyError) as exc:
        print(f"nmfrlct: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
