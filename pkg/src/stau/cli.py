"""Command-line front end: train, eval, ablate, dump-attention, gen-data."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import statistics
import sys
from dataclasses import fields

import numpy as np

from . import datagen
from .config import PRESETS, RunConfig, coerce, preset
from .images import minmax, save_gray, tile
from .model import load_checkpoint
from .train import TrainingDiverged, evaluate_model, load_data, train

log = logging.getLogger("stau")

# supervision wiring of the four interaction variants: (temporal, spatial)
SUPERVISION_VARIANTS = {
    "S<->T": ("cross", "cross"),
    "S->T;T-/>S": ("cross", "self"),
    "S-/>T;T->S": ("self", "cross"),
    "S<-/->T": ("self", "self"),
}
RECEPTIVE_VALUES = (1, 2, 5)

ABLATION_FIELDS = ["variant", "seed", "tau", "theta", "use_tam", "use_sam",
                   "temporal_supervision", "spatial_supervision", "parameters",
                   "macs_per_step", "final_loss", "mse", "mse_sum", "psnr", "ssim"]


def limit_threads():
    """Honour STAU_THREADS by capping BLAS/OpenMP pools; returns the limiter or None."""
    n = os.environ.get("STAU_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


# ---------------------------------------------------------------------------
# config assembly


def add_config_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="mnist")
    p.add_argument("--config", help="key = value file; explicit flags override it")
    g = p.add_argument_group("run configuration (mirrors RunConfig keys)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = type(getattr(RunConfig(), f.name))
        if typ is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS)
        else:
            g.add_argument(flag, dest=f.name, type=lambda s, t=typ: coerce(t, s),
                           default=argparse.SUPPRESS)
    g.add_argument("--no-tam", dest="use_tam", action="store_false", default=argparse.SUPPRESS)
    g.add_argument("--no-sam", dest="use_sam", action="store_false", default=argparse.SUPPRESS)


def build_config(args) -> RunConfig:
    """preset < config file < explicit flags."""
    cfg = preset(args.preset)
    if args.config:
        cfg = RunConfig.load(args.config, base=cfg)
    names = {f.name for f in fields(RunConfig)}
    explicit = {k: v for k, v in vars(args).items() if k in names}
    return cfg.replace(**explicit)


def _split(cfg, split):
    train_set, held = load_data(cfg)
    return train_set if split == "train" else held


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = build_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.save(os.path.join(cfg.out, "config.txt"))
    try:
        res = train(cfg)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    print(res.checkpoint)
    return 0


def write_frame_dumps(out_dir, frames, preds, cond_len, count):
    """One grid per sequence: top row ground truth, bottom row context + predictions."""
    paths = []
    for i in range(min(count, frames.shape[0])):
        seq = frames[i, :, 0]
        shown = [seq[t] for t in range(seq.shape[0])]
        predicted = [seq[t] for t in range(cond_len)] + [preds[i, t, 0] for t in range(preds.shape[1])]
        grid = tile(shown + predicted, cols=len(shown))
        paths += save_gray(os.path.join(out_dir, f"seq{i:03d}"), grid)
    return paths


def run_eval(model, frames, cond_len, horizon, out_dir, label="", dump=0):
    cfg = model.config
    if frames.shape[2:] != (cfg.frame_channels, cfg.canvas, cfg.canvas):
        raise ValueError(f"dataset frames {frames.shape[2:]} do not match the checkpoint "
                         f"({cfg.frame_channels}, {cfg.canvas}, {cfg.canvas})")
    report, preds = evaluate_model(model, frames, cond_len, horizon, label)
    os.makedirs(out_dir, exist_ok=True)
    report.save(os.path.join(out_dir, "metrics.csv"))
    if dump:
        frame_dir = os.path.join(out_dir, "frames")
        os.makedirs(frame_dir, exist_ok=True)
        write_frame_dumps(frame_dir, frames[:, :cond_len + horizon], preds, cond_len, dump)
    return report


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    cond_len = args.cond_len or cfg.cond_len
    horizon = args.horizon or cfg.horizon
    frames = datagen.load_batch(args.dataset) if args.dataset else _split(cfg, args.split)
    if cond_len + horizon > frames.shape[1]:
        print(f"error: sequences have {frames.shape[1]} frames, need {cond_len + horizon}",
              file=sys.stderr)
        return 2
    out = args.out or os.path.join(cfg.out, "eval")
    try:
        report = run_eval(model, frames, cond_len, horizon, out, args.split, args.dump)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    agg = report.aggregate()
    print(f"mse {agg['mse']:.6g} mse_sum {agg['mse_sum']:.6g} psnr {agg['psnr']:.4f} "
          f"ssim {agg['ssim']:.4f}")
    print(os.path.join(out, "metrics.csv"))
    return 0


def ablation_variants(grid, base: RunConfig, names=None):
    """(name, config) pairs for a supervision or receptive-field grid."""
    out = []
    if grid == "supervision":
        for name, (ts, ss) in SUPERVISION_VARIANTS.items():
            out.append((name, base.replace(temporal_supervision=ts, spatial_supervision=ss)))
    elif grid == "receptive":
        for tau in RECEPTIVE_VALUES:
            for theta in RECEPTIVE_VALUES:
                out.append((f"tau={tau};theta={theta}", base.replace(tau=tau, theta=theta)))
    elif grid == "modules":
        out = [("STAU", base), ("STAU w/o TAM", base.replace(use_tam=False)),
               ("STAU w/o SAM", base.replace(use_sam=False)),
               ("STAU w/o TAM,SAM", base.replace(use_tam=False, use_sam=False))]
    else:
        raise ValueError(f"unknown grid {grid!r}")
    if names:
        keep = set(names)
        unknown = keep - {n for n, _ in out}
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}")
        out = [(n, c) for n, c in out if n in keep]
    return out


def slug(name):
    table = {"<": "l", ">": "g", "/": "x", ";": "_", "=": "", ",": "_", " ": "_"}
    return "".join(table.get(ch, ch) for ch in name)


def run_ablation(base: RunConfig, grid, seeds, out_dir, split="train", names=None):
    """Train and evaluate every variant for every seed; returns the list of row dicts."""
    rows = []
    for name, vcfg in ablation_variants(grid, base, names):
        for seed in seeds:
            cfg = vcfg.replace(seed=seed, out=os.path.join(out_dir, slug(name), f"seed{seed}"))
            os.makedirs(cfg.out, exist_ok=True)
            cfg.save(os.path.join(cfg.out, "config.txt"))
            train_set, held = load_data(cfg)
            res = train(cfg, train_set)
            frames = train_set if split == "train" else held
            report = run_eval(res.model, frames, cfg.cond_len, cfg.horizon,
                              os.path.join(cfg.out, "eval"), split)
            agg = report.aggregate()
            rows.append({
                "variant": name, "seed": seed, "tau": cfg.tau, "theta": cfg.theta,
                "use_tam": cfg.use_tam, "use_sam": cfg.use_sam,
                "temporal_supervision": cfg.temporal_supervision,
                "spatial_supervision": cfg.spatial_supervision,
                "parameters": res.model.num_parameters(),
                "macs_per_step": res.model.macs_per_step(),
                "final_loss": res.losses[-1] if res.losses else math.nan,
                **agg,
            })
            log.info("%s seed %d: mse %.6g ssim %.4f", name, seed, agg["mse"], agg["ssim"])
    return rows


def median_by_variant(rows, key="mse"):
    order, groups = [], {}
    for r in rows:
        if r["variant"] not in groups:
            order.append(r["variant"])
            groups[r["variant"]] = []
        groups[r["variant"]].append(r[key])
    return {v: statistics.median(groups[v]) for v in order}


def supervision_ordering(medians):
    """Check full <= each single-supervision variant <= no-supervision on median MSE."""
    full, none_ = medians["S<->T"], medians["S<-/->T"]
    singles = [medians["S->T;T-/>S"], medians["S-/>T;T->S"]]
    failures = []
    for name, val in zip(("S->T;T-/>S", "S-/>T;T->S"), singles):
        if not full <= val:
            failures.append(f"S<->T ({full:.6g}) > {name} ({val:.6g})")
        if not val <= none_:
            failures.append(f"{name} ({val:.6g}) > S<-/->T ({none_:.6g})")
    return failures


def write_ablation(path, rows, grid):
    """Merged CSV: one row per (variant, seed), then a median row per variant."""
    medians = median_by_variant(rows)
    ssim_med = median_by_variant(rows, "ssim")
    with open(path, "w", newline="") as fh:
        fh.write("# macs_per_step: conv multiply-accumulates + attention dot products and "
                 "weighted sums, all cells, one time step, one sample\n")
        fh.write("# mse: per_pixel_mean, 0-1 scale, closed-loop prediction\n")
        w = csv.DictWriter(fh, ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r[k]) for k in ABLATION_FIELDS})
        for v, m in medians.items():
            first = next(r for r in rows if r["variant"] == v)
            w.writerow({**{k: _cell(first[k]) for k in ABLATION_FIELDS}, "seed": "median",
                        "final_loss": "", "mse": _cell(m), "mse_sum": "", "psnr": "",
                        "ssim": _cell(ssim_med[v])})
        if grid == "supervision" and len(medians) == len(SUPERVISION_VARIANTS):
            failures = supervision_ordering(medians)
            status = "PASS" if not failures else "FAIL: " + "; ".join(failures)
            fh.write(f"# ordering S<->T <= single-supervision <= S<-/->T (median mse): {status}\n")
    return medians


def read_ablation(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else v


def cmd_ablate(args):
    cfg = build_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    names = args.variants.split(",") if args.variants else None
    os.makedirs(cfg.out, exist_ok=True)
    rows = run_ablation(cfg, args.grid, seeds, cfg.out, args.split, names)
    path = os.path.join(cfg.out, f"ablation_{args.grid}.csv")
    write_ablation(path, rows, args.grid)
    print(path)
    return 0


def dump_attention(model, frames, step, layer, out_dir, sample=0):
    """Teacher-forced rollout up to ``step``; write weights and maps of cell (step, layer)."""
    cfg = model.config
    if not 1 <= layer <= cfg.layers:
        raise ValueError(f"layer must lie in [1, {cfg.layers}]")
    if not 1 <= step < frames.shape[1]:
        raise ValueError(f"step must lie in [1, {frames.shape[1] - 1}]")
    from . import tensor as T
    with T.no_grad():
        res = model.rollout(frames[:, :step + 1], record_maps=True)
    trace = res.traces[step - 1][layer - 1]
    os.makedirs(out_dir, exist_ok=True)
    _write_weights(os.path.join(out_dir, "alpha.csv"), trace.alphas, "t", step - 1)
    _write_weights(os.path.join(out_dir, "beta.csv"), trace.betas, "k", layer - 1)
    with open(os.path.join(out_dir, "gate_means.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gate", "mean"])
        for k, v in trace.gate_means.items():
            w.writerow([k, repr(v)])
            log.info("gate %s mean %.4f", k, v)
    for name, arr in trace.maps.items():
        chans = [minmax(c) for c in arr[sample]]
        cols = int(math.ceil(math.sqrt(len(chans))))
        save_gray(os.path.join(out_dir, name), tile(chans, cols))
    return trace


def _write_weights(path, weights, axis, newest):
    """One row per sample; columns are history entries, newest first."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"{axis}={newest - i}" for i in range(len(weights))])
        if not weights:
            return
        # per-location maps are reported as their spatial mean, which still sums to 1
        vals = [a.reshape(a.shape[0], -1).mean(axis=1) for a in weights]
        for b in range(vals[0].shape[0]):
            w.writerow([b] + [repr(float(v[b])) for v in vals])


def cmd_dump_attention(args):
    model, _ = load_checkpoint(args.checkpoint)
    if args.dataset:
        frames = datagen.load_batch(args.dataset)
    else:
        frames = _split(model.config, args.split)
    frames = frames[args.sequence:args.sequence + 1]
    if len(frames) == 0:
        print("error: sequence index out of range", file=sys.stderr)
        return 2
    out = args.out or os.path.join(model.config.out, f"attention_t{args.step}_k{args.layer}")
    try:
        dump_attention(model, frames, args.step, args.layer, out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


def cmd_gen_data(args):
    cfg = build_config(args)
    train_set, held = load_data(cfg.replace(dataset=""))
    batch = train_set if args.split == "train" else held
    datagen.save_batch(args.output, batch)
    print(args.output)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stau", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + loss log")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", help="STAUSEQ1 file; default regenerates data from the config")
    e.add_argument("--split", choices=("train", "eval"), default="eval")
    e.add_argument("--cond-len", type=int)
    e.add_argument("--horizon", type=int)
    e.add_argument("--out")
    e.add_argument("--dump", type=int, default=4, help="number of sequences to render")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate a grid of variants")
    add_config_flags(a)
    a.add_argument("--grid", choices=("supervision", "receptive", "modules"), default="supervision")
    a.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    a.add_argument("--variants", help="comma-separated subset of variant names")
    a.add_argument("--split", choices=("train", "eval"), default="train")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-attention", help="write attention weights, gates and state maps")
    d.add_argument("checkpoint")
    d.add_argument("--dataset")
    d.add_argument("--split", choices=("train", "eval"), default="eval")
    d.add_argument("--sequence", type=int, default=0)
    d.add_argument("--step", type=int, required=True)
    d.add_argument("--layer", type=int, required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_attention)

    g = sub.add_parser("gen-data", help="write a STAUSEQ1 sequence batch")
    add_config_flags(g)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--output", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    limiter = limit_threads()
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
