"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 input-contract violation,
3 estimation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import EstimationError, MomentStats, estimate
from .files import (DatasetError, estimate_to_dict, failure_dict, read_dataset, read_masked,
                    read_raw, write_dataset)
from .model import MixtureSpec
from .sampling import SeedSpec, apply_tm2_noise, sample_dataset
from .simulation import (ScenarioConfig, report_csv, report_json, run_scenario,
                         table1_spec, table2_spec, table_presets)

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_ESTIMATION = 0, 1, 2, 3

SPEC_PRESETS = {
    "table1": lambda: table1_spec(0.5),
    "s2_p01": lambda: table1_spec(0.1),
    "s2_p09": lambda: table1_spec(0.9),
    "table2": table2_spec,
}
METHODS = {"cmle": "NaiveMLE", "ls": "NaiveLS", "cls": "CorrectedLS"}


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args) -> int:
    env = os.environ.get("PRIVMASK_SEED")
    seed = int(env) if env not in (None, "") else args.seed
    if seed is None:
        raise InputError("a seed is required (--seed or PRIVMASK_SEED)")
    if not 0 <= seed < 2**64:
        raise InputError("seed must be a 64-bit unsigned integer")
    return seed


def _load_spec(args) -> MixtureSpec:
    if (args.preset is None) == (args.spec_file is None):
        raise InputError("give exactly one of --preset or --spec-file")
    if args.preset is not None:
        key = args.preset.lower().replace("-", "_")
        if key not in SPEC_PRESETS:
            raise InputError(f"unknown preset {args.preset!r}; choose from {sorted(SPEC_PRESETS)}")
        spec = SPEC_PRESETS[key]()
    else:
        try:
            spec = MixtureSpec.from_dict(json.loads(Path(args.spec_file).read_text()))
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise InputError(f"invalid spec file: {exc}") from exc
    if (args.model == "conditional") != spec.conditional:
        raise InputError(f"--model {args.model} does not match the spec (q={spec.q})")
    return spec


def cmd_gen(args):
    spec = _load_spec(args)
    if args.n < 1:
        raise InputError("--n must be positive")
    raw = sample_dataset(spec, args.n, SeedSpec(_seed(args)))
    write_dataset(args.out, raw.y_star, raw.W_star, raw.p, raw.q, 0.0, masked=False)
    return EXIT_OK


def cmd_mask(args):
    if args.sigma < 0:
        raise InputError("--sigma must be nonnegative")
    try:
        raw = read_raw(args.inp)
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    if raw.n < raw.p + raw.q + 2:
        raise InputError("too few rows to mask")
    masked = apply_tm2_noise(raw, args.sigma, SeedSpec(_seed(args)))
    write_dataset(args.out, masked.y, masked.W, masked.p, masked.q, masked.sigma, masked=True)
    return EXIT_OK


def _write_json(obj, out):
    text = json.dumps(obj, indent=2) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_estimate(args):
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    method = METHODS[args.method]
    try:
        _, _, meta = read_dataset(args.inp)
        if method == "CorrectedLS" and meta["masked"] and meta.get("sigma") is None:
            raise InputError("cls needs sigma in the metadata")
        data = read_masked(args.inp)
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    if method == "NaiveMLE" and meta["masked"]:
        print("note: cmle treats masked real-valued y as if it were binary; "
              "its intervals are not valid under noise", file=sys.stderr)
    try:
        est = estimate(data, method, args.alpha)
    except EstimationError as exc:
        _write_json(failure_dict(method, args.alpha, str(exc)), args.out)
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    _write_json(estimate_to_dict(est), args.out)
    return EXIT_OK


def _scenario_from_dict(d: dict, i: int) -> ScenarioConfig:
    d = dict(d)
    if "spec" in d:
        spec = d.pop("spec")
        spec = SPEC_PRESETS[spec.lower()]() if isinstance(spec, str) else MixtureSpec.from_dict(spec)
    else:
        raise ValueError("scenario lacks 'spec'")
    d.setdefault("model", "Conditional" if spec.conditional else "Unconditional")
    d.setdefault("root_seed", i)
    d.setdefault("name", f"scenario{i}")
    if "methods" in d:
        d["methods"] = tuple(METHODS.get(m, m) for m in d["methods"])
    return ScenarioConfig(spec=spec, **d)


def load_simulation_config(text: str):
    """Parse ``preset:NAME`` or a JSON config file into scenario configs."""
    if text.startswith("preset:"):
        return table_presets(text[len("preset:"):])
    cfg = json.loads(Path(text).read_text())
    if "scenarios" in cfg:
        return [_scenario_from_dict(s, i) for i, s in enumerate(cfg["scenarios"])]
    if "preset" not in cfg:
        raise ValueError("config needs 'preset' or 'scenarios'")
    configs = table_presets(cfg["preset"])
    if "n" in cfg:
        configs = [c for c in configs if c.n in set(cfg["n"])]
    if "sigma" in cfg:
        configs = [c for c in configs if c.sigma in set(map(float, cfg["sigma"]))]
    over = {}
    for k in ("reps", "alpha", "mask"):
        if k in cfg:
            over[k] = cfg[k]
    if "methods" in cfg:
        over["methods"] = tuple(METHODS.get(m, m) for m in cfg["methods"])
    if "root_seed" in cfg:
        return [replace(c, root_seed=int(cfg["root_seed"]) + 1009 * i, **over)
                for i, c in enumerate(configs)]
    return [replace(c, **over) for c in configs]


def cmd_simulate(args):
    if args.threads < 1:
        raise InputError("--threads must be >= 1")
    try:
        configs = load_simulation_config(args.config)
    except (OSError, ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    if not configs:
        raise InputError("config selects no scenarios")
    reports = []
    for i, c in enumerate(configs, 1):
        print(f"[{i}/{len(configs)}] {c.name} (reps={c.reps})", file=sys.stderr, flush=True)
        reports.append(run_scenario(c, threads=args.threads))
    out = Path(args.out)
    out.write_text(report_csv(reports))
    out.with_suffix(".json").write_text(json.dumps(report_json(reports), indent=2) + "\n")
    return EXIT_OK


def cmd_verify(args):
    """Check a dataset's metadata and, given its raw source, moment preservation."""
    try:
        y, W, meta = read_dataset(args.inp)
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    result = {"file": str(args.inp), "metadata_ok": True, "n": int(meta["n"])}
    ok = True
    if args.raw is not None:
        try:
            ry, rW, rmeta = read_dataset(args.raw)
        except DatasetError as exc:
            raise InputError(str(exc)) from exc
        if (rmeta["n"], rmeta["p"], rmeta["q"]) != (meta["n"], meta["p"], meta["q"]):
            raise InputError("raw and masked files differ in shape")
        a, b = MomentStats.from_data(y, W), MomentStats.from_data(ry, rW)
        rel = {
            "WtW": float(np.abs(a.ww - b.ww).max() / np.abs(b.ww).max()),
            "Wty": float(np.abs(a.wy - b.wy).max() / max(np.abs(b.wy).max(), 1e-300)),
            "yty": float(abs(a.yy - b.yy) / max(b.yy, 1e-300)),
        }
        result["moment_rel_error"] = rel
        if float(meta.get("sigma") or 0.0) == 0.0:
            ok = max(rel.values()) <= args.tol
            result["moments_preserved"] = ok
        else:
            result["moments_preserved"] = None
    result["ok"] = ok
    print(json.dumps(result, indent=2))
    return EXIT_OK if ok else EXIT_INPUT


def build_parser():
    ap = _Parser(prog="privmask", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"privmask {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a raw dataset from a mixture model")
    g.add_argument("--model", choices=["mixture", "conditional"], default="mixture")
    g.add_argument("--preset")
    g.add_argument("--spec-file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    m = sub.add_parser("mask", help="apply a random orthogonal mask plus Gaussian noise")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--sigma", type=float, required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask)

    e = sub.add_parser("estimate", help="estimate logistic slopes")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--method", choices=sorted(METHODS), default="cls")
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--out", default="-")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    s.add_argument("--config", required=True, help="JSON file or preset:NAME")
    s.add_argument("--out", required=True, help="CSV path; a .json report is written alongside")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="check metadata and moment preservation")
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--raw")
    v.add_argument("--tol", type=float, default=1e-8)
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"privmask: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
