"""Command-line entry point: ``most {gen-data,pretrain,run,report,export-images}``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import engine as E
from .config import ORDER_PRESETS, STRATEGIES, ConfigError, ExperimentConfig, parse_config
from .tensor import Tensor
from .experiment import has_errors, rows_from_run, run_experiment
from .io import (
    config_from_checkpoint,
    export_images,
    load_arrays,
    load_run,
    read_report,
    save_arrays,
    unpack_train_state,
    write_report,
    pack_train_state,
)

log = logging.getLogger("most")


def _on_off(value: str) -> bool:
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return v == "on"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file (defaults apply to omitted keys)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--order", help=f"{'|'.join(ORDER_PRESETS)} or a comma list of tasks")
    p.add_argument("--buffer-size", type=int, dest="buffer_size")
    p.add_argument("--replay", type=_on_off, metavar="{on,off}")
    p.add_argument("--ig", type=_on_off, metavar="{on,off}")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")


def load_config(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in ("strategy", "order", "buffer_size", "replay", "ig") if getattr(args, k, None) is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if args.config is not None:
        return parse_config(args.config, overrides)
    return ExperimentConfig(**overrides)


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        mask, recon, tasks, _ = E.build_data(cfg, seed)
        arrays = {"mask.columns": mask.columns.astype(np.float64)}
        for name, data in [(E.RECON_TASK, recon)] + list(tasks.items()):
            for split in ("train", "val", "test"):
                arr = getattr(data, split)
                for key in ("x", "y", "z", "k_re", "k_im"):
                    arrays[f"{name}.{split}.{key}"] = getattr(arr, key)
        path = args.out / f"data_seed{seed}.ckpt"
        save_arrays(path, arrays)
        print(f"wrote {path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        setup = E.prepare(cfg, seed)
        state = E.initial_state(setup, cfg)
        path = args.out / f"pretrain_seed{seed}.ckpt"
        save_arrays(path, pack_train_state(state))
        vals = ", ".join(f"{k} {v:.4f}" for k, v in sorted(setup.downstream_val.items()))
        print(f"seed {seed}: recon val SSIM {setup.pretrain_val_ssim:.4f}; downstream val {vals}; wrote {path}")
    return 0


def cmd_run(args) -> int:
    if args.resume is not None:
        cfg = config_from_checkpoint(args.resume)
        arrays = load_arrays(args.resume)
        seed = int(arrays["state.seed"][0])
        setup = E.prepare(cfg, seed)
        run = load_run(args.resume, cfg, setup)
        result = E.run_sequence(cfg, seed, setup=setup, run=run)
        rows = rows_from_run(cfg, seed, run)
        print(f"resumed seed {seed} from stage {int(arrays['state.stage'][0])}; final theta {result.theta_hash()}")
    else:
        cfg = load_config(args)
        ckpt = args.out / "checkpoints" if args.checkpoints else None
        rows = run_experiment(cfg, checkpoint_dir=ckpt)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "report.csv"
    write_report(rows, path)
    print(f"wrote {len(rows)} rows to {path}")
    return 1 if has_errors(rows) else 0


def summarize(rows: list[dict[str, str]]) -> list[str]:
    """Seed-averaged LM and FM per (experiment, strategy, order, task)."""
    lm, fm = defaultdict(list), defaultdict(list)
    for r in rows:
        if r["is_last"] != "1":
            continue
        key = (r["experiment"], r["strategy"], r["order"], r["task"], r["metric"])
        lm[key].append(float(r["value"]))
        if r["fm"]:
            fm[key].append(float(r["fm"]))
    lines = [f"{'experiment':<28} {'strategy':<8} {'order':<7} {'task':<6} {'metric':<5} {'LM':>8} {'FM':>8} seeds"]
    for key in sorted(lm):
        exp, strat, order, task, metric = key
        f = f"{np.mean(fm[key]):8.4f}" if fm[key] else f"{'-':>8}"
        lines.append(f"{exp:<28} {strat:<8} {order:<7} {task:<6} {metric:<5} {np.mean(lm[key]):8.4f} {f} {len(lm[key])}")
    return lines


def cmd_report(args) -> int:
    rows = []
    for p in args.reports:
        rows.extend(read_report(p))
    for line in summarize(rows):
        print(line)
    return 0


def cmd_export_images(args) -> int:
    cfg = load_config(args)
    seed = cfg.seeds[0]
    setup = E.prepare(cfg, seed)
    state = E.initial_state(setup, cfg)
    if args.checkpoint is not None:
        unpack_train_state(load_arrays(args.checkpoint), state)
    samples = []
    for name in (E.RECON_TASK,) + tuple(n for n in cfg.task_order if n.startswith("seg")):
        data = setup.recon_data if name == E.RECON_TASK else setup.tasks[name]
        arr = data.test.take(np.arange(min(args.count, len(data.test))))
        recon = E.reconstruct_np(state.recon, arr, state.mask)
        for i in range(len(arr)):
            samples += [(arr.x[i, 0], f"{name}_{i}_input"), (arr.y[i, 0], f"{name}_{i}_target"), (recon[i, 0], f"{name}_{i}_recon")]
            if name != E.RECON_TASK:
                logits = setup.downstream[name].forward(Tensor(recon[i:i + 1])).data
                samples.append(((logits[0, 0] > 0).astype(float), f"{name}_{i}_pred"))
    paths = export_images(samples, args.out / "images")
    print(f"wrote {len(paths)} images to {args.out / 'images'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="most", description="Continual task-oriented finetuning of a toy MRI reconstruction net.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize and undersample all datasets")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train downstream nets and pretrain the reconstruction net")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run the sequential finetuning experiment and write report.csv")
    _add_common(p)
    p.add_argument("--checkpoints", action="store_true", help="save a checkpoint after every stage")
    p.add_argument("--resume", type=Path, help="continue a run from a stage checkpoint")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="print seed-averaged LM/FM from report CSVs")
    p.add_argument("reports", nargs="+", type=Path)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-images", help="write input/target/reconstruction PGMs for a few test images")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="load θ from this checkpoint instead of the pretrained state")
    p.add_argument("--count", type=int, default=2)
    p.set_defaults(func=cmd_export_images)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
