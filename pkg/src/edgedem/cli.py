"""Command-line entry point: ``edgedem {run,sweep,matching-bench,cluster-snapshot}``."""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import MATCHING_SCHEMES, dump_config, load_config
from .exceptions import EdgeDemError, TooLarge
from .experiment import Replication, emit_results, run_experiment, sweep


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgedem", description="Edge-assisted hierarchical learning simulator.")
    p.add_argument("--config", type=Path, help="YAML config file (defaults are used for missing keys)")
    p.add_argument("--seed", type=int, help="base seed; overrides run.seed")
    p.add_argument("--out-dir", type=Path, help="output directory; overrides output.out_dir")
    p.add_argument("--replications", type=int, help="number of seeded replications; overrides run.replications")
    p.add_argument("--trace-matching", action="store_true", help="write matching_trace.jsonl with every swap")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the configured experiment and write per-round results")
    run.add_argument("--print-config", action="store_true", help="print the effective config and exit")

    sw = sub.add_parser("sweep", help="mean delay over a grid of UE and SBS counts")
    sw.add_argument("--n-ues", type=_int_list, default=[10, 20, 30, 40, 50], help="comma-separated UE counts")
    sw.add_argument("--n-sbs", type=_int_list, default=[3, 5, 7], help="comma-separated SBS counts")
    sw.add_argument("--learn", action="store_true", help="also run the learning phase in every cell")

    mb = sub.add_parser("matching-bench", help="compare association schemes on the configured network")
    mb.add_argument("--schemes", default=",".join(MATCHING_SCHEMES), help="comma-separated schemes")

    cs = sub.add_parser("cluster-snapshot", help="dendrogram of the personal models after the configured rounds")
    cs.add_argument("--replication", type=int, default=0, help="replication index to snapshot")
    return p


def _effective_config(args):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over.setdefault("run", {})["seed"] = args.seed
    if args.replications is not None:
        over.setdefault("run", {})["replications"] = args.replications
    if args.out_dir is not None:
        over.setdefault("output", {})["out_dir"] = str(args.out_dir)
    if args.trace_matching:
        over.setdefault("output", {})["trace_matching"] = True
    return cfg.replace(**over) if over else cfg


def cmd_run(cfg, args) -> int:
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return 0
    results = run_experiment(cfg)
    paths = emit_results(results, cfg.output.out_dir, cfg)
    for name, path in paths.items():
        print(f"{name}: {path}")
    failed = [r.error for r in results if r.error]
    for err in failed:
        print(f"replication {err['replication']} failed: {err['error']}: {err['message']}", file=sys.stderr)
    return 1 if failed else 0


def cmd_sweep(cfg, args) -> int:
    res = sweep(cfg, args.n_ues, args.n_sbs, learn=args.learn)
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(res.to_csv())
    doc = {"schema_version": "1.0", "rows": "n_ues", "columns": "n_sbs", "n_ues": res.n_values,
           "n_sbs": res.s_values, "matching": cfg.scheme.matching,
           "mean_delay_ms": res.mean_delay_ms.tolist(), "mean_total_delay_ms": res.mean_total_delay_ms.tolist()}
    (out / "sweep.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(res.to_csv(), end="")
    return 0


def cmd_matching_bench(cfg, args) -> int:
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    bad = set(schemes) - set(MATCHING_SCHEMES)
    if bad:
        raise EdgeDemError(f"unknown schemes: {sorted(bad)}")
    rows = []
    for scheme in schemes:
        delays, swaps, wall = [], [], []
        c = cfg.replace(scheme={"matching": scheme}, train={"rounds": 1})
        for rep in range(cfg.run.replications):
            r = Replication(c, rep, learn=False)
            t0 = time.perf_counter()
            try:
                rec = r.run()[0]
            except TooLarge as exc:
                print(f"{scheme}: skipped ({exc})", file=sys.stderr)
                break
            wall.append(time.perf_counter() - t0)
            delays.append(rec.system_delay_ms)
            swaps.append(rec.swaps)
        if delays:
            rows.append({"scheme": scheme, "mean_delay_ms": float(np.mean(delays)),
                         "std_delay_ms": float(np.std(delays)), "mean_swaps": float(np.mean(swaps)),
                         "mean_wall_s": float(np.mean(wall)), "replications": len(delays)})
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matching_bench.json").write_text(json.dumps({"schema_version": "1.0", "schemes": rows}, indent=2) + "\n")
    print(f"{'scheme':<10} {'delay_ms':>14} {'std_ms':>12} {'swaps':>7} {'wall_s':>8}")
    for row in rows:
        print(f"{row['scheme']:<10} {row['mean_delay_ms']:>14.1f} {row['std_delay_ms']:>12.1f} "
              f"{row['mean_swaps']:>7.1f} {row['mean_wall_s']:>8.3f}")
    return 0


def cmd_cluster_snapshot(cfg, args) -> int:
    c = cfg.replace(scheme={"learning": "demlearn"})
    recs = Replication(c, args.replication).run()
    snaps = [{"round": r.round, "groups": r.groups, **r.dendrogram} for r in recs if r.dendrogram]
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": "1.0", "replication": args.replication, "final": snaps[-1] if snaps else None,
           "rounds": snaps}
    path = out / "dendrogram.json"
    path.write_text(json.dumps(doc) + "\n")
    print(f"dendrogram: {path}")
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "matching-bench": cmd_matching_bench,
            "cluster-snapshot": cmd_cluster_snapshot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        return COMMANDS[args.command](cfg, args)
    except (EdgeDemError, OSError) as exc:
        print(f"edgedem: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
