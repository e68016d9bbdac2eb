"""Command-line entry point: gen, train, eval, verify, gradcheck, info,
dump-config.

Exit codes: 0 success, 1 usage/config error, 2 assertion or verification
failure (including training divergence), 3 I/O error.

The --threads flag (or GERSEG_THREADS) is read before numpy is imported and
pins every BLAS thread pool, which is what makes repeated runs of the same
command bit-identical; --threads 1 is the default and the reproducibility
contract.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields

from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, DataError, ShapeError,
                     StateError, TrainingDiverged)

_CONFIG_KEYS = [f.name for f in fields(RunConfig)]


def _pin_threads(argv):
    n = os.environ.get("GERSEG_THREADS", "1")
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif arg.startswith("--threads="):
            n = arg.split("=", 1)[1]
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value config file")
    for key in _CONFIG_KEYS:
        common.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                            default=None, metavar="V")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    p = argparse.ArgumentParser(prog="gerseg",
                                description="dihedral-group-equivariant segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--resume", action="store_true", help="continue from <out-dir>/last.ckpt")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    v = sub.add_parser("verify", parents=[common],
                       help="check rotate-then-predict vs predict-then-rotate")
    v.add_argument("--checkpoint")
    v.add_argument("--random-weights", action="store_true")
    v.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    v.add_argument("--dump-heatmaps", action="store_true")
    g = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every layer's backward")
    g.add_argument("--probes", type=int, default=100)
    i = sub.add_parser("info", parents=[common], help="describe a checkpoint")
    i.add_argument("--checkpoint", required=True)
    sub.add_parser("dump-config", parents=[common], help="print the merged configuration")
    return p


def _collect_overrides(args) -> dict:
    return {key: getattr(args, f"cfg_{key}") for key in _CONFIG_KEYS}


def _net_config(cfg: RunConfig):
    from .net import NetConfig

    return NetConfig(
        base_width=cfg.base_width, stages=cfg.stages,
        blocks_per_stage=cfg.blocks_per_stage, skip_mode=cfg.skip_mode,
        downsample=cfg.downsample, upsample_mode=cfg.upsample_mode,
        group_mode=cfg.group_mode, n_classes=cfg.n_classes,
        width_scale=cfg.width_scale, in_channels=cfg.in_channels,
    )


def _train_config(cfg: RunConfig):
    from .train import TrainConfig

    return TrainConfig(
        batch_size=cfg.batch_size, lr0=cfg.lr0, max_epochs=cfg.max_epochs,
        early_stop_patience=cfg.early_stop_patience, lr_decay=cfg.lr_decay,
        lr_patience=cfg.lr_patience, seed=cfg.seed, augment=cfg.augment,
    )


def _synth_config(cfg: RunConfig):
    from .synthdata import SynthConfig

    return SynthConfig(
        n_images=cfg.n_images, image_size=cfg.image_size, blobs_min=cfg.blobs_min,
        blobs_max=cfg.blobs_max, radius_min=cfg.radius_min, radius_max=cfg.radius_max,
        fg_mean=cfg.fg_mean, bg_mean=cfg.bg_mean, noise_sigma=cfg.noise_sigma,
        seed=cfg.data_seed,
    )


def _write_run_json(cfg: RunConfig, command: str, started: float, outputs: list[str]):
    import numpy as np

    from . import __version__

    os.makedirs(cfg.out_dir, exist_ok=True)
    payload = {
        "command": command,
        "config_sha256": cfg.sha256(),
        "config": {k: getattr(cfg, k) for k in _CONFIG_KEYS},
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "elapsed_seconds": round(time.perf_counter() - started, 3),
        "outputs": outputs,
    }
    with open(os.path.join(cfg.out_dir, "run.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def cmd_gen(cfg: RunConfig, args) -> int:
    from . import synthdata as sd

    started = time.perf_counter()
    corpus = sd.generate(_synth_config(cfg))
    train, val, test = sd.split(corpus, cfg.train_frac, cfg.data_seed)
    sd.save_corpus({"train": train, "val": val, "test": test}, cfg.corpus_dir)
    print(f"wrote {len(train)}/{len(val)}/{len(test)} train/val/test samples to {cfg.corpus_dir}")
    _write_run_json(cfg, "gen", started, [cfg.corpus_dir])
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    import numpy as np

    from . import synthdata as sd
    from .net import build, load_checkpoint
    from .train import fit

    started = time.perf_counter()
    corpus = sd.load_corpus(cfg.corpus_dir)
    net_cfg = _net_config(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    resume_state = None
    if args.resume:
        last = os.path.join(cfg.out_dir, "last.ckpt")
        net, resume_state = load_checkpoint(last, expect_config=net_cfg, dtype=np.float32)
        if resume_state is None:
            raise CheckpointError(f"{last} carries no training state to resume from")
        print(f"resuming from {last} at epoch {resume_state['epoch']}")
    else:
        net = build(net_cfg, seed=cfg.seed, dtype=np.float32)
    try:
        result = fit(net, corpus["train"], corpus["val"], _train_config(cfg),
                     out_dir=cfg.out_dir, resume_state=resume_state)
    except TrainingDiverged as e:
        diag_path = os.path.join(cfg.out_dir, "diverged.json")
        with open(diag_path, "w") as f:
            json.dump(e.diagnostics, f, indent=2, sort_keys=True, default=float)
        print(f"error: {e} (diagnostics in {diag_path})", file=sys.stderr)
        return 2
    print(f"trained {result.epochs_run} epochs ({result.total_steps} steps); "
          f"best val dice {result.best_val_dice:.4f} at epoch {result.best_epoch}"
          + (" [early stop]" if result.stopped_early else ""))
    _write_run_json(cfg, "train", started,
                    ["best.ckpt", "last.ckpt", "train_log.csv"])
    return 0


EVAL_COLUMNS = ("dice", "hausdorff", "jaccard", "precision", "specificity", "f1")


def cmd_eval(cfg: RunConfig, args) -> int:
    import numpy as np

    from . import synthdata as sd
    from .evalmetrics import dataset_aggregate, evaluate_pair
    from .net import load_checkpoint
    from .train import normalize, predicted_foreground

    started = time.perf_counter()
    net, _ = load_checkpoint(args.checkpoint, dtype=np.float32)
    samples = sd.load_corpus(cfg.corpus_dir)[args.split]
    if not samples:
        raise DataError(f"split {args.split!r} is empty under {cfg.corpus_dir}")
    reports = []
    os.makedirs(cfg.out_dir, exist_ok=True)
    jsonl_path = os.path.join(cfg.out_dir, f"eval_{args.split}.jsonl")
    with open(jsonl_path, "w") as jf:
        for lo in range(0, len(samples), cfg.batch_size):
            batch = samples[lo : lo + cfg.batch_size]
            xb = np.stack([normalize(s.image).astype(np.float32) for s in batch])
            pred = predicted_foreground(net.forward(xb, train=False))
            for s, p in zip(batch, pred):
                rep = evaluate_pair(p, s.mask > 0)
                reports.append(rep)
                row = {"id": s.id} | {k: getattr(rep, k) for k in EVAL_COLUMNS}
                row |= {k: getattr(rep, k) for k in ("tp", "fp", "tn", "fn")}
                jf.write(json.dumps(row, sort_keys=False) + "\n")
    summary = dataset_aggregate(reports)
    csv_path = os.path.join(cfg.out_dir, f"eval_{args.split}_summary.csv")
    with open(csv_path, "w") as cf:
        cf.write("aggregate," + ",".join(EVAL_COLUMNS) + "\n")
        for agg in ("macro", "micro"):
            vals = [summary[agg][k] for k in EVAL_COLUMNS]
            cf.write(agg + "," + ",".join("" if v is None else _fmt(v) for v in vals) + "\n")
    macro = summary["macro"]
    shown = " ".join(f"{k}={macro[k]:.4f}" for k in EVAL_COLUMNS if macro[k] is not None)
    print(f"{args.split}: n={summary['n_cases']} {shown}")
    _write_run_json(cfg, "eval", started, [jsonl_path, csv_path])
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    import numpy as np

    from . import synthdata as sd
    from .net import build, load_checkpoint
    from .train import normalize
    from .verify import equivariance_rows, passes_tolerance

    started = time.perf_counter()
    dtype = np.float64 if args.dtype == "float64" else np.float32
    if args.checkpoint and args.random_weights:
        raise ConfigError("give either --checkpoint or --random-weights, not both")
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint, dtype=dtype)
    else:
        if not args.random_weights:
            raise ConfigError("verify needs --checkpoint or --random-weights")
        net = build(_net_config(cfg), seed=cfg.seed, dtype=dtype)

    sample = sd.generate_sample(_synth_config(cfg), 0)
    x = normalize(sample.image)[None].astype(dtype)
    rows = equivariance_rows(net, x)

    os.makedirs(cfg.out_dir, exist_ok=True)
    tsv_path = os.path.join(cfg.out_dir, "verify.tsv")
    outputs = [tsv_path]
    with open(tsv_path, "w") as f:
        f.write("element\tmax_abs\tmax_rel\tmask_diff_px\n")
        for r in rows:
            f.write(f"{r['element']}\t{_fmt(r['max_abs'])}\t{_fmt(r['max_rel'])}"
                    f"\t{r['mask_diff_px']}\n")
            print(f"{r['element']}: max_abs={r['max_abs']:.3e} "
                  f"max_rel={r['max_rel']:.3e} mask_diff_px={r['mask_diff_px']}")
    if args.dump_heatmaps:
        for r in rows:
            path = os.path.join(cfg.out_dir, f"verify_heatmap_{r['element']}.pgm")
            sd.write_pgm(path, r["diff_map"])
            outputs.append(path)
    _write_run_json(cfg, "verify", started, outputs)

    if net.config.group_mode == "group":
        if passes_tolerance(rows, dtype):
            print("equivariance: PASS")
            return 0
        print("equivariance: FAIL", file=sys.stderr)
        return 2
    print("regular-mode network: report only, no tolerance applied")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import run_gradcheck

    started = time.perf_counter()
    rows = run_gradcheck(seed=cfg.seed, n_probes=args.probes)
    os.makedirs(cfg.out_dir, exist_ok=True)
    tsv_path = os.path.join(cfg.out_dir, "gradcheck.tsv")
    with open(tsv_path, "w") as f:
        f.write("layer\tprobes\tmax_rel_err\tpass\n")
        for r in rows:
            f.write(f"{r.name}\t{r.probes}\t{_fmt(r.max_rel_err)}\t{int(r.passed)}\n")
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.max_rel_err:.3e}")
    _write_run_json(cfg, "gradcheck", started, [tsv_path])
    return 0 if all(r.passed for r in rows) else 2


def cmd_info(cfg: RunConfig, args) -> int:
    import numpy as np

    from .net import load_checkpoint

    net, state = load_checkpoint(args.checkpoint, dtype=np.float32)
    print(net.config.to_text(), end="")
    print(f"{'layer':28s} {'kind':20s} {'params':>8s}  weight shapes")
    total = 0
    for row in net.describe():
        shapes = " ".join(f"{p}{list(s)}" for p, s in row["shapes"].items()) or "-"
        print(f"{row['name']:28s} {row['kind']:20s} {row['params']:8d}  {shapes}")
        total += row["params"]
    assert total == net.param_count()
    print(f"total trainable parameters: {total}")
    if state is not None:
        print(f"training state: epoch {state['epoch']}, step {state['step']}, "
              f"best val dice {state['best_val_dice']:.4f}")
    return 0


def cmd_dump_config(cfg: RunConfig, args) -> int:
    print(cfg.to_text(), end="")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "info": cmd_info,
    "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _pin_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _collect_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ShapeError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, DataError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
