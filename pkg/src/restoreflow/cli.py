"""Command-line entry point: degrade, pretrain, train, restore, eval, sweep, adapter."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import container, lora
from .config import RunConfig, load_config
from .degradations import build_dataset, load_dataset_dir, write_dataset_dir
from .experiments import (EVAL_SEED, degraded_floor, evaluate_model, fresh_base, pretrain_base, report_meta,
                          as_report)
from .imageio import ImageFormatError, read_image, write_image
from .metrics import FeatureExtractor
from .sampler import NumericalError, SampleConfig, restore
from .text import TASKS, UnknownTokenError, task_prompt
from .trainer import TrainConfig, format_log, load_checkpoint, save_checkpoint, train

log = logging.getLogger("restoreflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _threads_limit():
    n = os.environ.get("E2R_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        for section in (cfg.data, cfg.train, cfg.sample, cfg.pretrain):
            section.seed = args.seed
    return cfg


def _tasks(value: str | None) -> list[str] | None:
    if value is None:
        return None
    tasks = [t.strip() for t in value.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise UsageError(f"invalid task(s) {', '.join(bad)}; choose from {{{', '.join(TASKS)}}}")
    return tasks


# ---------------------------------------------------------------- commands


def cmd_degrade(args) -> int:
    cfg = _config(args)
    tasks = _tasks(args.tasks) or cfg.data.tasks
    n = args.n_per_task or cfg.data.n_per_task
    size = cfg.model.image_size
    train_ds = build_dataset(n, tasks, cfg.data.seed, "train", size)
    eval_ds = build_dataset(cfg.data.eval_per_task, tasks, cfg.data.seed + EVAL_SEED, "eval", size)
    manifest = write_dataset_dir(args.out, [train_ds, eval_ds])
    n_train = sum(e["split"] == "train" for e in manifest["records"])
    print(f"wrote {n_train} train and {len(manifest['records']) - n_train} eval records to {args.out}")
    for note in manifest["notes"]:
        print(f"note: {note}")
    return EXIT_OK


def _load_or_pretrain_base(cfg: RunConfig, base_path: Path):
    if base_path.exists():
        return load_checkpoint(base_path)
    log.info("no base checkpoint at %s; pre-training one", base_path)
    p = cfg.pretrain
    _, result = pretrain_base(cfg.model.build(), p.iterations, p.lr, p.warmup_steps, p.corpus_size, p.seed,
                              cfg.model.seed)
    base_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, base_path)
    return result.checkpoint


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        print(f"{out} exists; pass --force to overwrite")
        return EXIT_OK
    if out.exists():
        out.unlink()
    _load_or_pretrain_base(cfg, out)
    print(f"base checkpoint written to {out}")
    return EXIT_OK


def _train_config(cfg: RunConfig, args) -> TrainConfig:
    overrides = {}
    if args.regime:
        overrides["regime"] = args.regime
    if args.task:
        overrides["task"] = args.task
    if args.iterations:
        overrides["iterations"] = args.iterations
        overrides["warmup_steps"] = min(cfg.train.warmup_steps, args.iterations)
    if args.text_trainable:
        overrides["text_encoder_trainable"] = True
    try:
        return cfg.train.build(**overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = _train_config(cfg, args)
    dataset = load_dataset_dir(args.data, "train")
    out = Path(args.out)
    base_path = Path(args.base) if args.base else out.with_name("base.e2rc")
    base = _load_or_pretrain_base(cfg, base_path)
    model = fresh_base(base)
    pool = [r for r in dataset.records if tcfg.regime == "unified" or r.task == tcfg.task]
    print(f"regime={tcfg.regime} task={tcfg.task or 'all'}: training on {len(pool)} records")
    print(f"text-embedder: {'trainable' if tcfg.text_encoder_trainable else 'frozen'}")
    result = train(model, dataset, tcfg, checkpoint_path=out, log_path=out.with_suffix(".loss.csv"),
                   extra={"base": str(base_path)})
    lora.save_adapter(result.adapter, out.with_suffix(".e2ra"))
    print(f"checkpoint {out}, adapter {out.with_suffix('.e2ra')}, loss log {out.with_suffix('.loss.csv')}")
    return EXIT_OK


def _model_from_args(args):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint).build_model()
        return model
    if not args.base:
        raise UsageError("pass --checkpoint, or --base with an optional --adapter")
    model = fresh_base(load_checkpoint(args.base))
    if args.adapter:
        if not Path(args.adapter).exists():
            raise FileNotFoundError(f"adapter file not found: {args.adapter}")
        lora.attach(model, lora.load_adapter(args.adapter))
    return model


def cmd_restore(args) -> int:
    for p in (args.checkpoint, args.base, args.adapter):
        if p and not Path(p).exists():
            raise FileNotFoundError(f"file not found: {p}")
    cfg = _config(args)
    if args.prompt_free:
        prompt = ""
    elif args.prompt in TASKS:
        prompt = task_prompt(args.prompt)
    elif args.prompt in [task_prompt(t) for t in TASKS]:
        prompt = args.prompt
    else:
        raise UsageError(f"prompt must be one of the templates or a task name {TASKS}; or pass --prompt-free")
    model = _model_from_args(args)
    image = read_image(args.input)
    sample = SampleConfig(args.steps or cfg.sample.steps,
                          cfg.sample.guidance if args.guidance is None else args.guidance,
                          cfg.sample.seed, prompt)
    out = restore(model, image, prompt, sample)
    write_image(args.out, out)
    print(f"restored {image.shape[1]}x{image.shape[0]} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    eval_set = load_dataset_dir(args.data, "eval")
    if not eval_set.records:
        raise ValueError(f"eval split in {args.data} is empty")
    extractor = FeatureExtractor(cfg.eval.extractor_seed)
    bw = cfg.eval.bandwidth
    steps, guidance, seed = cfg.sample.steps, cfg.sample.guidance, cfg.sample.seed
    model, _ = ckpt.build_model()
    rows = evaluate_model(model, eval_set, "lora", steps, guidance, seed, extractor, bw)
    parts = [degraded_floor(eval_set, extractor, bw)]
    if args.with_baseline or cfg.eval.with_baseline:
        parts.append(evaluate_model(fresh_base(ckpt), eval_set, "baseline", steps, guidance, seed, extractor, bw))
    parts.append(rows)
    report = as_report(*parts, meta=report_meta(extractor, bw, {"steps": steps, "guidance": guidance, "seed": seed}))
    report.write(args.report)
    print(report.to_csv(), end="")
    return EXIT_OK


def _sweep_grid(args) -> list[dict]:
    runs = []
    for n in args.n_per_task:
        for te in args.text_encoder:
            for regime in args.regimes:
                if regime == "unified":
                    runs.append({"n": n, "regime": "unified", "task": None, "te": te})
                else:
                    runs += [{"n": n, "regime": "per-task", "task": t, "te": te} for t in TASKS]
    return runs


def _run_name(run: dict) -> str:
    task = run["task"] or "all"
    return f"n{run['n']}_{run['regime']}_{task}_{'te' if run['te'] else 'tf'}"


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = _load_or_pretrain_base(cfg, out / "base.e2rc")
    extractor = FeatureExtractor(cfg.eval.extractor_seed)
    size = cfg.model.image_size
    eval_set = build_dataset(cfg.data.eval_per_task, TASKS, cfg.data.seed + EVAL_SEED, "eval", size)
    s = cfg.sample
    grid = _sweep_grid(args)
    print(f"sweep: {len(grid)} runs")
    for i, run in enumerate(grid):
        run_dir = out / _run_name(run)
        if (run_dir / "checkpoint.e2rc").exists() and (run_dir / "report.csv").exists():
            print(f"[{i + 1}/{len(grid)}] {run_dir.name}: done, skipping")
            continue
        run_dir.mkdir(exist_ok=True)
        seed = int(np.random.default_rng([cfg.train.seed, i]).integers(2**31))
        tcfg = cfg.train.build(regime=run["regime"], task=run["task"], text_encoder_trainable=run["te"], seed=seed)
        train_set = build_dataset(run["n"], TASKS, cfg.data.seed, "train", size)
        model = fresh_base(base)
        result = train(model, train_set, tcfg, log_path=run_dir / "loss.csv")
        ev = eval_set.filter(run["task"]) if run["task"] else eval_set
        rows = evaluate_model(model, ev, _run_name(run), s.steps, s.guidance, s.seed, extractor, cfg.eval.bandwidth)
        as_report(rows).write(run_dir / "report.csv")
        lora.save_adapter(result.adapter, run_dir / "adapter.e2ra")
        save_checkpoint(result.checkpoint, run_dir / "checkpoint.e2rc")  # written last: marks the run complete
        print(f"[{i + 1}/{len(grid)}] {run_dir.name}: finished")
    _write_sweep_summary(out, grid)
    return EXIT_OK


SUMMARY_GROUPS = [("haze", None), ("rain", None), ("noise", 15.0), ("noise", 25.0), ("noise", 50.0)]


def _write_sweep_summary(out: Path, grid: list[dict]) -> None:
    """Rows like the pairs-per-task table: unified runs, then task-specific runs merged per (n, encoder)."""
    from .metrics import MetricReport

    header = ["pairs_per_task", "regime", "text_encoder"]
    for task, sigma in SUMMARY_GROUPS:
        key = task if sigma is None else f"{task}_s{int(sigma)}"
        header += [f"{key}_fid", f"{key}_mmd", f"{key}_psnr"]
    merged: dict[tuple, list] = {}
    for run in grid:
        key = (run["n"], run["regime"], run["te"])
        rows = MetricReport.read_csv(out / _run_name(run) / "report.csv").rows
        merged.setdefault(key, []).extend(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for (n, regime, te), rows in merged.items():
            label = "unified" if regime == "unified" else "task-specific"
            line = [n, label, "tuned" if te else "frozen"]
            for task, sigma in SUMMARY_GROUPS:
                hit = [r for r in rows if r.task == task and r.sigma == sigma]
                line += [f"{hit[0].fid:.4f}", f"{hit[0].mmd:.5f}", f"{hit[0].psnr:.3f}"] if hit else ["", "", ""]
            w.writerow(line)


def cmd_adapter(args) -> int:
    if args.action == "info":
        header, arrays = container.read(args.path, lora.MAGIC, lora.VERSION)
        n = sum(a.size for a in arrays.values())
        print(json.dumps({k: header[k] for k in ("rank", "alpha", "task_tag", "sites")}, indent=2))
        print(f"trainable parameters: {n}; file bytes: {Path(args.path).stat().st_size}")
        return EXIT_OK
    # merge: fold the adapter into the base weights and save an adapter-free checkpoint
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model, adapter = ckpt.build_model()
    else:
        if not args.base or not args.adapter:
            raise UsageError("merge needs --checkpoint, or both --base and --adapter")
        ckpt = load_checkpoint(args.base)
        model = fresh_base(ckpt)
        adapter = lora.load_adapter(args.adapter)
    if adapter is None:
        raise UsageError("checkpoint carries no adapter")
    lora.merge(adapter, model)
    ckpt.model = model.state_arrays()
    ckpt.adapter_meta, ckpt.adapter = None, {}
    save_checkpoint(ckpt, args.out)
    print(f"merged {len(adapter.sites)} sites into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _text_encoder_arm(value: str) -> bool:
    if value not in ("frozen", "tuned"):
        raise argparse.ArgumentTypeError(f"invalid text-encoder arm {value!r}; choose from {{frozen, tuned}}")
    return value == "tuned"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="restoreflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--seed", type=int, help="overrides every seed in the config")

    sp = sub.add_parser("degrade", help="materialize a synthetic paired dataset directory")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-task", type=int)
    sp.add_argument("--tasks", help=f"comma-separated subset of {','.join(TASKS)}")
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("pretrain", help="pre-train the prompt-free base transformer")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train a LoRA adapter on a dataset directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path (.e2rc); adapter and loss log are written beside it")
    sp.add_argument("--base", help="base checkpoint; pre-trained and saved as base.e2rc beside --out when absent")
    sp.add_argument("--regime", choices=["unified", "per-task"])
    sp.add_argument("--task", choices=list(TASKS))
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--text-trainable", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("restore", help="restore one PPM image")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--base")
    sp.add_argument("--adapter")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--prompt", default="")
    sp.add_argument("--prompt-free", action="store_true")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--guidance", type=float)
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("eval", help="metric report for a checkpoint on a dataset's eval split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--with-baseline", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="pairs-per-task x regime x text-encoder grid")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-task", type=int, nargs="+", default=[16, 32, 64, 128])
    sp.add_argument("--regimes", nargs="+", choices=["unified", "per-task"], default=["unified"])
    sp.add_argument("--text-encoder", nargs="+", type=_text_encoder_arm, default=[False],
                    metavar="{frozen,tuned}")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("adapter", help="inspect or merge adapters")
    asub = sp.add_subparsers(dest="action", required=True)
    info = asub.add_parser("info")
    info.add_argument("path")
    merge = asub.add_parser("merge")
    merge.add_argument("--checkpoint")
    merge.add_argument("--base")
    merge.add_argument("--adapter")
    merge.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_adapter)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = _threads_limit()
    try:
        return args.func(args)
    except (UsageError, ValidationError, UnknownTokenError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, container.ContainerError, ImageFormatError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limit is not None:
            limit.unregister() if hasattr(limit, "unregister") else None


if __name__ == "__main__":
    sys.exit(main())
