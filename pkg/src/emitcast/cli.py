"""Command line entry point: ``emitcast {run,sweep,verify,export}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .harness import BACKENDS, RunConfig, run, sweep


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emitcast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run the frame loop and write stats"),
                        ("sweep", "16-point (gamma_T, chi_T) threshold sweep"),
                        ("verify", "run with oracle checks on every tenth frame"),
                        ("export", "run and write one point cloud per frame")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML run config")
        s.add_argument("--backend", choices=BACKENDS)
        s.add_argument("--frames", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--verify", action="store_true", help="compare sampled frames to brute force")
        s.add_argument("--out", help="stats / sweep output path (JSON)")
        s.add_argument("--export-ply", metavar="DIR", help="write per-frame point clouds into DIR")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        over = {k: v for k, v in (("backend", args.backend), ("frames", args.frames),
                                  ("seed", args.seed), ("threads", args.threads)) if v is not None}
        cfg = dataclasses.replace(cfg, **over)
    except (OSError, ValueError) as e:
        print(f"emitcast: {e}", file=sys.stderr)
        return 2

    if args.command == "sweep":
        rows = sweep(cfg, out=args.out)
        for r in rows:
            print(f"gamma_t={r['gamma_t']:4d} chi_t={r['chi_t']:4d} mean={r['mean_ms']:9.3f} ms "
                  f"sat={r['sat']:.0f} bat={r['bat']:.0f} rtic={r['rtic']:.0f}")
        return 0

    verify = args.verify or args.command == "verify" or cfg.verify
    export_dir = args.export_ply
    if args.command == "export" and not (export_dir or cfg.point_cloud_dir):
        print("emitcast: export needs --export-ply DIR or point_cloud_dir in the config", file=sys.stderr)
        return 2
    try:
        doc = run(cfg, out=args.out, export_ply=export_dir, verify=verify)
    except (RuntimeError, ValueError) as e:
        print(f"emitcast: {e}", file=sys.stderr)
        return 1
    s = doc["stats"]
    print(f"backend={doc['backend']} frames={len(s['frame_ms'])} mean={s['mean_ms']:.3f} ms "
          f"within20={s['within_20pct']:.2f} below_mean={s['below_mean']:.2f}")
    for r in doc["match_reports"]:
        print(f"frame {r['frame']}: match {r['fraction']:.4%} ({r['matched']}/{r['compared']})")
    if not args.out and not cfg.stats_path:
        json.dump(s, sys.stdout)
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
