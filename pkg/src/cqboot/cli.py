"""Command line front end: ``cqboot {fit,ci,simulate,oracle}``.

Reports are JSON (fit, ci, oracle) or CSV (simulate).  Every command is
deterministic given its inputs and seed; JSON reports carry a
``generated_at`` timestamp, which is the only field that varies between
reruns.  Options may also come from ``--config FILE.json``, a single object
whose keys are option names (``"boot": 1000``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import LAMBDA_DEFAULT, Method, run_bootstrap
from .data_model import load_csv, load_model_spec
from .errors import CQError, ConfigError
from .qlearning import fit_backward
from .simulation import (GenerativeConfig, run_experiment, scenario_presets, select_presets,
                         true_stage1_params, write_metrics_csv)


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _emit_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _heartbeat(label: str, every: int):
    def report(done: int, total: int) -> None:
        if done % every == 0 or done == total:
            print(f"{label}: {done}/{total}", file=sys.stderr, flush=True)
    return report


def _load(args):
    if not args.data or not args.spec:
        raise ConfigError("--data and --spec are required")
    specs, roles = load_model_spec(args.spec)
    return load_csv(args.data, specs, roles), specs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    ds, specs = _load(args)
    res = fit_backward(ds, specs, wc_policy=args.working)
    stages = []
    for k in sorted(res.stage_fits):
        f = res.stage_fits[k]
        se = f.gls.sandwich_se
        stages.append({
            "stage": k,
            "n_clusters": f.gls.n_clusters_used,
            "n_obs": f.gls.n_obs,
            "rho_hat": f.gls.rho_hat,
            "working_rho": f.gls.working.rho,
            "sigma2_hat": f.gls.sigma2_hat,
            "converged": f.gls.converged,
            "coefficients": [{"label": lab, "group": g, "estimate": float(t), "se": _num(s)}
                             for lab, g, t, s in zip(f.labels, f.spec.groups(), f.theta_hat, se)],
        })
    _emit_json({"command": "fit", "version": __version__, "generated_at": _timestamp(),
                "data": str(args.data), "working": args.working, "stages": stages}, args.out)
    return 0


def _eta(value):
    if value in (None, "auto"):
        return "auto"
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--eta must be 'auto' or a number, got {value!r}") from None


def cmd_ci(args) -> int:
    ds, specs = _load(args)
    B = args.boot
    res = run_bootstrap(ds, specs, method=args.method, B=B, alpha=args.alpha, lam=args.lam,
                        eta=_eta(args.eta), seed=args.seed, stage=args.stage,
                        ci_form=args.ci_form, n_jobs=args.parallel,
                        progress=_heartbeat("replicates", 100) if args.progress else None)
    params = [{"label": lab, "group": g, "estimate": float(t), "lower": float(lo),
               "upper": float(hi)}
              for lab, g, t, lo, hi in zip(res.labels, res.groups, res.point, res.ci_lower,
                                           res.ci_upper)]
    rep = res.report
    doc = {
        "command": "ci", "version": __version__, "generated_at": _timestamp(),
        "data": str(args.data), "method": res.method.value, "seed": res.seed,
        "B": res.n_replicates_requested, "alpha": res.alpha, "stage": res.stage,
        "nonregularity": None if rep is None else {
            "p_hat": rep.p_hat, "eta": _num(rep.eta), "lambda": rep.lam, "m_hat": rep.m_hat,
            "n_next": int(rep.t_stats.size)},
        "ci": {
            "form": res.ci_form,
            "level": 1 - res.alpha,
            "resample_size": res.resample_size,
            "n_pool": res.n_pool,
            "n_valid": res.n_replicates_valid,
            "parameters": params,
        },
    }
    _emit_json(doc, args.out)
    return 0


def _gen_configs(args) -> list[tuple[str, GenerativeConfig]]:
    if args.gen_config and args.preset:
        raise ConfigError("give either --preset or --gen-config, not both")
    if args.gen_config:
        try:
            doc = json.loads(Path(args.gen_config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read generative config: {e}") from None
        docs = doc if isinstance(doc, list) else [doc]
        out = []
        for i, d in enumerate(docs):
            d = dict(d)
            name = str(d.pop("name", f"custom{i + 1}" if len(docs) > 1 else "custom"))
            out.append((name, GenerativeConfig.from_dict(d)))
        return out
    if not args.preset:
        raise ConfigError("--preset or --gen-config is required")
    presets = scenario_presets()
    return [(n, presets[n]) for n in select_presets(args.preset)]


def cmd_simulate(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()] \
        if isinstance(args.methods, str) else list(args.methods)
    methods = [Method.parse(m) for m in methods]
    if args.boot < 100:
        raise ConfigError(f"--boot {args.boot}: at least 100 replicates are required")
    configs = _gen_configs(args)
    metrics = []
    for name, cfg in configs:
        prog = _heartbeat(f"{name} runs", 100) if args.progress else None
        ms = run_experiment(cfg, methods, n_runs=args.runs, B=args.boot, alpha=args.alpha,
                            lam=args.lam, seed=args.seed, n_jobs=args.parallel, progress=prog)
        metrics += [_relabel(m, name) for m in ms]
    out = args.out
    if out:
        write_metrics_csv(metrics, out)
        echo = {
            "command": "simulate", "version": __version__, "generated_at": _timestamp(),
            "seed": args.seed, "runs": args.runs, "boot": args.boot, "alpha": args.alpha,
            "lambda": args.lam, "methods": [m.value for m in methods],
            "configs": {n: c.to_dict() for n, c in configs},
            "truth": {n: true_stage1_params(c).to_dict() for n, c in configs},
        }
        Path(str(out) + ".config.json").write_text(json.dumps(echo, indent=2) + "\n")
    else:
        write_metrics_csv(metrics, sys.stdout)
    return 0


def _relabel(m, name):
    return replace(m, label=name)


def cmd_oracle(args) -> int:
    results = []
    for name, cfg in _gen_configs(args):
        t = true_stage1_params(cfg)
        results.append({"name": name, "psi10": t.psi10, "psi11": t.psi11, "p": t.p,
                        "effect_size": t.effect_size, "projection": t.projection,
                        "config": cfg.to_dict()})
    _emit_json({"command": "oracle", "version": __version__, "generated_at": _timestamp(),
                "results": results}, args.out)
    return 0


COMMANDS = {"fit": cmd_fit, "ci": cmd_ci, "simulate": cmd_simulate, "oracle": cmd_oracle}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--out", help="output file (default: standard output)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--parallel", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker processes (results do not depend on this)")
    common.add_argument("--progress", action="store_true", help="heartbeats on standard error")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="CSV, one row per individual")
    data.add_argument("--spec", help="JSON model spec")

    boot = argparse.ArgumentParser(add_help=False)
    boot.add_argument("--boot", type=int, default=1000, help="bootstrap replicates B")
    boot.add_argument("--alpha", type=float, default=0.05)
    boot.add_argument("--lambda", dest="lam", type=float, default=LAMBDA_DEFAULT)

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--preset", help="preset names or globs, comma separated")
    gen.add_argument("--gen-config", help="JSON generative config (object or list)")

    p = argparse.ArgumentParser(prog="cqboot", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"cqboot {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common, data], help="backward Q-learning fit")
    f.add_argument("--working", choices=["iterated", "independence"], default="iterated")

    c = sub.add_parser("ci", parents=[common, data, boot], help="bootstrap confidence intervals")
    c.add_argument("--method", default="MN-CB", help="MN-CB, CB, mn-B or MN-CB-w")
    c.add_argument("--eta", default="auto", help="'auto' or a threshold value")
    c.add_argument("--stage", type=int, default=1)
    c.add_argument("--ci-form", choices=["hybrid", "percentile"], default="hybrid")

    s = sub.add_parser("simulate", parents=[common, boot, gen], help="Monte Carlo experiment")
    s.add_argument("--methods", default="mn-B,CB,MN-CB")
    s.add_argument("--runs", type=int, default=500)

    sub.add_parser("oracle", parents=[common, gen], help="exact stage-1 truth")
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    doc.pop("command", None)
    if "lambda" in doc:
        doc["lam"] = doc.pop("lambda")
    if isinstance(doc.get("methods"), list):
        doc["methods"] = ",".join(doc["methods"])
    known = set(vars(args))
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**doc)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if not 0.0 < getattr(args, "alpha", 0.05) < 0.5:
            raise ConfigError(f"--alpha {args.alpha} outside (0, 0.5)")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except CQError as e:
        print(f"cqboot {args.command if 'args' in locals() else ''}: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
