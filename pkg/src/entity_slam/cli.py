"""Command line: ``run`` one preset, ``ablate`` over every preset, ``frames`` export."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation
from .pipeline import PRESETS, parse_setup, run
from .simulator import Simulator, load_scenario, write_frames

log = logging.getLogger("entity_slam")


def _write_run(report, scenario, out: Path) -> evaluation.MetricReport:
    out.mkdir(parents=True, exist_ok=True)
    report.write_trajectory(out / "trajectory.txt")
    metrics = evaluation.evaluate(report, scenario)
    evaluation.write_metrics(metrics, out / "metrics.json")
    with open(out / "decisions.tsv", "w", encoding="utf-8") as fh:
        fh.write("time\treasons\n")
        for t, reasons in report.decision_log:
            fh.write(f"{t!r}\t{','.join(reasons)}\n")
    with open(out / "loops.tsv", "w", encoding="utf-8") as fh:
        fh.write("time\tkf_old\tkf_new\tinconsistent\tpoints_before\tpoints_after\tfitness\tfitness_unfiltered\taccepted\n")
        for e in report.loop_log:
            fh.write(
                f"{e.time!r}\t{e.kf_old}\t{e.kf_new}\t{','.join(map(str, e.inconsistent))}\t"
                f"{e.points_before[0]},{e.points_before[1]}\t{e.points_after[0]},{e.points_after[1]}\t"
                f"{e.fitness!r}\t{e.fitness_unfiltered!r}\t{int(e.accepted)}\n"
            )
    with open(out / "timing.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\titerations\tinitial_cost\tfinal_cost\twall_ms\tsuccess\n")
        for i, r in enumerate(report.opt_reports, 1):
            fh.write(f"{i}\t{r.iterations}\t{r.initial_cost!r}\t{r.final_cost!r}\t{r.wall_time_ms:.3f}\t{int(r.success)}\n")
    report.graph.save(out / "graph.txt")
    return metrics


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario, seed=args.seed)
    setup = parse_setup(args.setup)
    report = run(scenario, setup)
    metrics = _write_run(report, scenario, Path(args.out))
    print(
        f"{scenario.name} {setup.name} seed={scenario.seed}: ATE {100 * metrics.ate_rmse:.2f} cm "
        f"(std {100 * metrics.ate_std:.2f}), {metrics.keyframes} keyframes, "
        f"{metrics.num_loop_closures} loop closures, {metrics.mean_opt_time:.1f} ms/optimization"
    )
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    presets = args.presets.split(",") if args.presets else list(PRESETS)
    all_metrics = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        scenario = load_scenario(args.scenario, seed=seed)
        for name in presets:
            setup = parse_setup(name)
            report = run(scenario, setup)
            m = _write_run(report, scenario, out / scenario.name / setup.name / f"seed{seed}")
            all_metrics.append(m)
            print(f"{scenario.name}\t{setup.name}\tseed={seed}\tATE {100 * m.ate_rmse:.2f} cm\t{report.wall_time:.1f} s", flush=True)
    table = evaluation.ablation_table(all_metrics)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    (out / "entities.tsv").write_text(evaluation.entity_table(all_metrics), encoding="utf-8")
    print(table, end="")
    return 0


def cmd_frames(args) -> int:
    scenario = load_scenario(args.scenario, seed=args.seed)
    n = write_frames(Simulator(scenario).run(), args.out)
    print(f"wrote {n} frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entity-slam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one setup on one scenario")
    r.add_argument("--scenario", required=True, help="YAML file or bundled name (s_saso, s_samo, s_maso, s_mamo)")
    r.add_argument("--setup", default="full", help=f"preset ({', '.join(PRESETS)}) or flag list")
    r.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run every preset over several seeds")
    a.add_argument("--scenario", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--first-seed", type=int, default=0)
    a.add_argument("--presets", default=None, help="comma-separated subset of presets")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("frames", help="export a scenario's frame stream as JSON lines")
    f.add_argument("--scenario", required=True)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_frames)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
