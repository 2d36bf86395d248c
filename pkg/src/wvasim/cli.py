"""Command-line entry point: ``wvasim run|compare|validate|arrivals|plots|scenarios``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .domain import Baseline, ScenarioConfig, ScenarioError, load_scenario, validate_scenario, with_overrides
from .harness import (
    MismatchedTraffic,
    RunSummary,
    compare_runs,
    emit_plot_data,
    load_summary,
    run_scenario,
    write_comparison,
)
from .metrics import CapacityError, MetricsSourceError, RegistryError
from .workload import generate_arrivals, write_arrivals_csv

logger = logging.getLogger("wvasim")

# Boot-time default for the optimizer mode; --optimizer-mode wins over it.
MODE_ENV = "WVASIM_OPTIMIZER_MODE"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2


def shipped_scenarios() -> dict[str, Path]:
    root = resources.files("wvasim") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_scenario_path(ref: str) -> Path:
    """A file path, or the bare name of a shipped scenario (``exp1_reactivity``)."""
    path = Path(ref)
    if path.exists():
        return path
    shipped = shipped_scenarios()
    if ref in shipped:
        return shipped[ref]
    raise FileNotFoundError(f"no scenario file or shipped scenario named {ref!r}")


def _load(ref: str, seed: int | None = None, baseline: str | None = None,
          mode: str | None = None) -> ScenarioConfig:
    cfg = load_scenario(resolve_scenario_path(ref))
    cfg = with_overrides(
        cfg,
        rng_seed=seed,
        baseline=Baseline(baseline) if baseline else None,
        optimizer_mode=mode,
    )
    return validate_scenario(cfg)


def _print_summary(s: RunSummary) -> None:
    t = s.totals
    print(f"{s.scenario} baseline={s.baseline} seed={s.seed}")
    print(f"  arrived={t['arrived']} completed={t['completed']} dropped={t['dropped']} "
          f"causes={t['drop_causes']}")
    print(f"  {'rps':>6} {'thr/s':>7} {'drops/s':>8} {'replicas':>9} {'max_hit':>7}")
    for p in s.phases:
        print(f"  {p.rps_target:>6g} {p.throughput_completed_rps:>7.3f} {p.drops_per_s:>8.3f} "
              f"{p.mean_replicas:>9.2f} {str(p.max_replicas_hit):>7}")


def cmd_run(args: argparse.Namespace) -> int:
    mode = args.optimizer_mode or os.environ.get(MODE_ENV) or None
    cfg = _load(args.scenario, args.seed, args.baseline, mode)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.name or 'scenario'}-{cfg.baseline.value}-s{cfg.rng_seed}"
    result = run_scenario(cfg, out_dir=out)
    _print_summary(result.summary)
    print(f"  artifacts: {out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    a, b = load_summary(args.run_a), load_summary(args.run_b)
    rows = compare_runs(a, b)
    out = Path(args.out) if args.out else Path(args.run_a) / "comparison"
    write_comparison(rows, out)
    print(f"{a.baseline} (a) vs {b.baseline} (b), scenario {a.scenario}, seed {a.seed}")
    print(f"  {'rps':>6} {'thr a':>7} {'thr b':>7} {'thr %':>7} {'drops a':>8} {'drops b':>8}")
    for r in rows:
        pct = "" if r["throughput_pct"] is None else f"{100 * r['throughput_pct']:+.1f}"
        print(f"  {r['rps']:>6g} {r['throughput_a']:>7.3f} {r['throughput_b']:>7.3f} {pct:>7} "
              f"{r['drops_a']:>8.3f} {r['drops_b']:>8.3f}")
    print(f"  total drops: a={a.totals['dropped']} b={b.totals['dropped']}")
    print(f"  tables: {out}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _load(args.scenario)
    print(f"{cfg.name or args.scenario}: ok ({len(cfg.variants)} variants)")
    return EXIT_OK


def cmd_arrivals(args: argparse.Namespace) -> int:
    cfg = _load(args.scenario, args.seed)
    requests = generate_arrivals(cfg.traffic_program, cfg.duration, cfg.rng_seed)
    write_arrivals_csv(requests, args.out)
    print(f"{len(requests)} arrivals -> {args.out}")
    return EXIT_OK


def cmd_plots(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else Path(args.run_dir) / "plots"
    for path in emit_plot_data(args.run_dir, out):
        print(path)
    return EXIT_OK


def cmd_scenarios(args: argparse.Namespace) -> int:
    for name, path in sorted(shipped_scenarios().items()):
        print(f"{name:<28} {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wvasim", description="Closed-loop LLM serving autoscaling simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario and write its artifacts")
    p.add_argument("scenario", help="scenario YAML path or shipped scenario name")
    p.add_argument("--out", help="output directory (default runs/<name>-<baseline>-s<seed>)")
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument("--baseline", choices=[b.value for b in Baseline], help="override the policy under test")
    p.add_argument("--optimizer-mode", choices=["constrained", "unconstrained"],
                   help=f"override the optimizer mode (default: ${MODE_ENV}, then the scenario)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="per-phase comparison of two run directories (a relative to b)")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", help="output directory (default <run_a>/comparison)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check a scenario file without running it")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("arrivals", help="export the generated request stream as CSV")
    p.add_argument("scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_arrivals)

    p = sub.add_parser("plots", help="regenerate plot-ready tables from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("scenarios", help="list the shipped scenarios")
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print("invalid scenario:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v.path}: {v.code}: {v.message}", file=sys.stderr)
        return EXIT_INVALID
    except (CapacityError, RegistryError, MetricsSourceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, MismatchedTraffic) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
