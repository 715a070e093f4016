"""Command-line entry point: ``pmpotts <command> ...``.

Exit codes: 0 on success, 2 for configuration errors and 3 when a compute
failure exceeds its budget.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as ex
from .metrics import modal_select, percent_correct, selection_bound, write_pgm
from .potts import read_field_csv, write_field_csv
from .samplers import ComputeBudgetError, read_long_csv
from .smc import EstimationFailure

EXIT_CONFIG = 2
EXIT_COMPUTE = 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ex.ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def _config_args(p: argparse.ArgumentParser, preset_positional: bool = False) -> None:
    if not preset_positional:
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="JSON experiment config")
        src.add_argument("--preset", help="name of a shipped preset")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--replicates", type=int, help="number of replicates")
    p.add_argument("--J", type=float, nargs="+", help="coupling values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. smc.n_particles=100 (JSON values)")


def _load_config(args) -> ex.ExperimentConfig:
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ex.ConfigError(f"cannot read config {args.config}: {exc}") from exc
    else:
        name = args.preset if getattr(args, "preset", None) else args.name
        if name not in ex.PRESETS:
            raise ex.ConfigError(f"unknown preset {name!r}; choose from {sorted(ex.PRESETS)}")
        raw = json.loads(json.dumps(ex.PRESETS[name]))
        raw.setdefault("out", f"runs/{name}")
    for key in ("seed", "out", "workers", "replicates", "J"):
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    for item in args.set:
        if "=" not in item:
            raise ex.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(raw, k.strip(), _parse_value(v))
    return ex.ExperimentConfig.from_dict(raw)


# --- commands -------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load_config(args)
    report = ex.run_study(cfg, cfg.out, cfg.workers)
    _print_table(report)
    print(f"wrote {cfg.out} (config {report.config_hash})")
    return 0


def _print_table(report) -> None:
    print(f"{'sampler':<28}{'J':>6}{'mean %':>10}{'sd':>8}{'n':>5}")
    for label, J, mean, sd, n in report.table():
        j = "" if J != J else f"{J:g}"
        print(f"{label:<28}{j:>6}{mean:>10.2f}{sd:>8.2f}{n:>5}")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    ex.simulate(cfg, cfg.out, replicate=args.replicate)
    print(f"wrote truth and data to {cfg.out}")
    return 0


def cmd_select(args) -> int:
    cfg = _load_config(args)
    problem = ex.build_problem(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = read_long_csv(args.trace, problem.graph.n_nodes, problem.states)
    res = modal_select(fields, n_states=len(problem.states), burn_in=args.burn_in)
    write_field_csv(out / "selected.csv", res.selected, problem.states)
    ex._stamp(out / "selected.csv", cfg.config_hash)
    write_pgm(out / "selected.pgm", res.selected.reshape(problem.graph.shape), levels=len(problem.states))
    ex.write_manifest(out, cfg, ["selected.csv", "selected.pgm"])
    print(f"percent correct: {percent_correct(res.selected, problem.truth):.2f}")
    return 0


def cmd_metrics(args) -> int:
    if args.run:
        text = (Path(args.run) / "percent_correct.csv").read_text()
        print(text, end="")
        vd = Path(args.run) / "vd_rmse.csv"
        if vd.exists():
            print(vd.read_text(), end="")
        return 0
    if not args.selected or not (args.config or args.preset):
        raise ex.ConfigError("metrics needs --run DIR, or --selected FILE with --config or --preset")
    cfg = _load_config(args)
    problem = ex.build_problem(cfg)
    sel = read_field_csv(args.selected, problem.graph.n_nodes, problem.states)
    print(f"percent correct: {percent_correct(sel, problem.truth):.2f}")
    return 0


def _parse_grid(text: str) -> list:
    out = []
    for cell in text.split(","):
        try:
            n, t = cell.lower().split("x")
            out.append((int(n), int(t)))
        except ValueError as exc:
            raise ex.ConfigError(f"grid cells look like 50x80, got {cell!r}") from exc
    return out


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    dest = Path(args.csv) if args.csv else Path(cfg.out) / "variance.csv"
    rows = ex.probe_variance(cfg, args.model, _parse_grid(args.grid), args.draws, dest)
    print(f"{'N':>6}{'T':>6}{'var log Z':>12}{'se':>10}")
    for N, T, _, var, se, _ in rows:
        print(f"{N:>6}{T:>6}{var:>12.4f}{se:>10.4f}")
    return 0


def cmd_bound(args) -> int:
    print(f"{selection_bound(args.delta, args.sigma, args.models):.4f}")
    return 0


def cmd_preset(args) -> int:
    if args.list or not args.name:
        for name in sorted(ex.PRESETS):
            print(name)
        return 0
    cfg = _load_config(args)
    if args.dump:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    report = ex.run_study(cfg, cfg.out, cfg.workers)
    _print_table(report)
    print(f"wrote {cfg.out} (config {report.config_hash})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmpotts", description="Spatial model selection with Potts priors.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a replicated study")
    _config_args(s)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("simulate", help="write the ground truth and one replicate's data")
    _config_args(s)
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("select", help="modal model selection from a stored trace")
    _config_args(s)
    s.add_argument("--trace", required=True, help="iteration,node,model CSV")
    s.add_argument("--burn-in", type=int, default=0)
    s.set_defaults(fn=cmd_select)

    s = sub.add_parser("metrics", help="percent correct of a selection, or a run's tables")
    s.add_argument("--run", help="study output directory")
    s.add_argument("--selected", help="node,model CSV")
    s.add_argument("--config")
    s.add_argument("--preset")
    for flag in ("--seed", "--out", "--workers", "--replicates"):
        s.add_argument(flag, type=str if flag == "--out" else int)
    s.add_argument("--J", type=float, nargs="+")
    s.add_argument("--set", action="append", default=[])
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("probe-variance", help="variance of log Z over an (N, T) grid")
    _config_args(s)
    s.add_argument("--model", required=True, help="model label, e.g. A or 2")
    s.add_argument("--grid", required=True, help="comma-separated NxT cells, e.g. 50x80,200x80")
    s.add_argument("--draws", type=int, default=100, help="estimates per cell")
    s.add_argument("--csv", help="output CSV (default OUT/variance.csv)")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("bound", help="lower bound on the chance of selecting the true model")
    s.add_argument("--models", type=int, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.set_defaults(fn=cmd_bound)

    s = sub.add_parser("preset", help="list, show or run a shipped preset")
    s.add_argument("name", nargs="?")
    s.add_argument("--list", action="store_true")
    s.add_argument("--dump", action="store_true", help="print the config instead of running it")
    _config_args(s, preset_positional=True)
    s.set_defaults(fn=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ex.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.StudyFailure, ComputeBudgetError, EstimationFailure) as exc:
        print(f"compute failure: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
