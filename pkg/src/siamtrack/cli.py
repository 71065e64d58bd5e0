"""Command-line entry point: gen-data / train / eval / sweep / report.

Every command is deterministic given its flags; all randomness flows through
explicit --seed arguments. Relative --out paths can be redirected with the
SIAMTRACK_OUT_ROOT environment variable. Exit codes: 0 ok, 2 usage or config
error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config, override_train
from .decode import write_tracks
from .model import load_model
from .perturb import search_sweep, staleness_sweep, summarize_sweeps, target_sweep
from .synthdata import (SequenceRecord, derive_seed, make_scene_script,
                        read_dataset, render_sequence, write_dataset)
from .trackeval import supervised_evaluate, write_eval_csv
from .train import TrainingDiverged, multi_seed, read_metrics_csv, train_run

TARGET_MODE_FLAGS = {
    "gt": "ground_truth_first_frame",
    "random_patch": "random_patch_first_frame",
}


def _out_path(raw: str) -> Path:
    root = os.environ.get("SIAMTRACK_OUT_ROOT")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _render_job(args):
    seq_id, kind, seed, num_frames, frame_size, tags = args
    script = make_scene_script(kind, seed, num_frames=num_frames, frame_size=frame_size)
    return SequenceRecord(seq_id=seq_id, sequence=render_sequence(script), tags=tags)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = _out_path(args.out)
    jobs = []
    counter = 0
    for gi, group in enumerate(cfg.scenes.groups):
        for k in range(group.count):
            seq_id = f"{group.kind}_{gi:02d}_{k:03d}"
            jobs.append((seq_id, group.kind, derive_seed(args.seed, counter),
                         group.num_frames, cfg.scenes.frame_size(), tuple(group.tags)))
            counter += 1
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(_render_job, jobs))
    else:
        records = [_render_job(j) for j in jobs]
    write_dataset(out, records)
    dump_config(cfg, out / "config.yaml")
    print(f"wrote {len(records)} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = override_train(cfg, variant=args.variant, seed=args.seed,
                         total_steps=args.steps)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    train_records = read_dataset(args.data, tags=("train",))
    eval_records = read_dataset(args.data, tags=("eval",))
    if not eval_records:
        eval_records = train_records
    try:
        train_run(cfg.train, train_records, eval_records, cfg.sampler, cfg.crops,
                  cfg.model, cfg.loss, cfg.select, cfg.eval, out_dir=out,
                  resume_from=args.resume)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model, step, extra = load_model(args.checkpoint)
    eval_cfg = replace(cfg.eval, target_mode=TARGET_MODE_FLAGS[args.target_mode],
                       patch_seed=args.seed)
    tags = (args.split,) if args.split else None
    records = read_dataset(args.data, tags=tags)
    if not records:
        print(f"no sequences matching split {args.split!r} in {args.data}", file=sys.stderr)
        return 1
    result = supervised_evaluate(model, records, eval_cfg, cfg.select, cfg.crops)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = extra.get("variant", "model")
    seed = extra.get("seed", 0)
    write_eval_csv(out / "eval.csv", name, seed, args.split or "all", result)
    tracks_dir = out / "tracks"
    tracks_dir.mkdir(exist_ok=True)
    for s in result.per_sequence:
        write_tracks(tracks_dir / f"{s.seq_id}.jsonl", s.seq_id,
                     s.pred_boxes, s.pred_scores)
    print(f"R={result.robustness():.4f} A={result.accuracy():.4f} "
          f"({len(records)} sequences) -> {out}")
    return 0


SWEEPS = {"search": search_sweep, "target": target_sweep, "staleness": staleness_sweep}


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    model, _, _ = load_model(args.checkpoint)
    tags = (args.split,) if args.split else None
    records = read_dataset(args.data, tags=tags)
    if not records:
        print(f"no sequences matching split {args.split!r} in {args.data}", file=sys.stderr)
        return 1
    grid = SWEEPS[args.kind](model, records, cfg.sweep, cfg.select, cfg.crops)
    out = _out_path(args.out)
    summaries = summarize_sweeps({grid.name: grid}, out)
    for key, value in sorted(summaries[grid.name].items()):
        print(f"{grid.name}.{key} = {value:.4f}")
    return 0


def _collect_runs(run_dirs):
    """metrics.csv rows for every seed directory under the given roots."""
    runs = []
    for root in run_dirs:
        root = Path(root)
        candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir())
        for c in candidates:
            if (c / "metrics.csv").exists():
                runs.append(read_metrics_csv(c / "metrics.csv"))
    return runs


def cmd_report(args) -> int:
    runs = _collect_runs(args.runs)
    if not runs:
        print("no metrics.csv found under the given run directories", file=sys.stderr)
        return 1
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_variant: dict = {}
    for rows in runs:
        by_variant.setdefault(rows[0]["variant"], []).append(rows)

    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "n_seeds", "R_mean", "R_se", "A_mean", "A_se"])
        for variant in sorted(by_variant):
            finals_r = [rows[-1]["R"] for rows in by_variant[variant]]
            finals_a = [rows[-1]["A"] for rows in by_variant[variant]]
            n = len(finals_r)
            if n < 2:
                print(f"warning: variant {variant!r} has a single run; "
                      "standard errors left blank", file=sys.stderr)
                w.writerow([variant, n, repr(float(finals_r[0])), "",
                            repr(float(finals_a[0])), ""])
            else:
                r = np.asarray(finals_r)
                a = np.asarray(finals_a)
                w.writerow([variant, n,
                            repr(float(r.mean())), repr(float(r.std(ddof=1) / n ** 0.5)),
                            repr(float(a.mean())), repr(float(a.std(ddof=1) / n ** 0.5))])

    fig, axp = plt.subplots(figsize=(6, 4))
    wrote_curves = False
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "variant", "r_mean", "r_se", "a_mean", "a_se"])
        for variant in sorted(by_variant):
            group = by_variant[variant]
            if len(group) < 2:
                continue
            curve = multi_seed(group)
            for row in curve:
                w.writerow([row["step"], variant, repr(row["r_mean"]), repr(row["r_se"]),
                            repr(row["a_mean"]), repr(row["a_se"])])
            steps = [r["step"] for r in curve]
            means = np.asarray([r["r_mean"] for r in curve])
            ses = np.asarray([r["r_se"] for r in curve])
            axp.plot(steps, means, label=variant)
            axp.fill_between(steps, means - ses, means + ses, alpha=0.25)
            wrote_curves = True
    if wrote_curves:
        axp.set_xlabel("training step")
        axp.set_ylabel("robustness (length-weighted failures)")
        axp.legend()
        fig.tight_layout()
        fig.savefig(out / "curves.png", dpi=110, metadata={"Software": None})
    plt.close(fig)
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamtrack",
                                description="Siamese tracker experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a tracker")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["with_detector", "no_detector"])
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="supervised evaluation of a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--target-mode", choices=sorted(TARGET_MODE_FLAGS), default="gt")
    e.add_argument("--split", help="keep only sequences carrying this tag")
    e.add_argument("--seed", type=int, default=0, help="random-patch seed")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="perturbation sweep of a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=sorted(SWEEPS), required=True)
    s.add_argument("--split", help="keep only sequences carrying this tag")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="aggregate run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
