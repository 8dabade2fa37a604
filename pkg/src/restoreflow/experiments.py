"""Toy-scale experiment harness: base pre-training, adapter runs and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import lora
from .degradations import PairedDataset, build_dataset, build_generic_corpus
from .metrics import FeatureExtractor, MetricReport, MetricRow, score_images
from .model import FlowTransformer, ModelConfig
from .sampler import restore_batch
from .trainer import Checkpoint, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

EVAL_SEED = 1000  # eval split seed; its clean images never overlap train/pretrain splits


def pretrain_base(model_cfg: ModelConfig, iterations: int = 3000, lr: float = 1e-3, warmup: int = 100,
                  corpus_size: int = 256, seed: int = 0, model_seed: int = 0) -> tuple[FlowTransformer, TrainResult]:
    """Train every transformer weight as a prompt-free generic restorer (the zero-shot base)."""
    model = FlowTransformer(model_cfg, seed=model_seed)
    corpus = build_generic_corpus(corpus_size, seed=seed, image_size=model_cfg.image_size)
    cfg = TrainConfig(iterations=iterations, target="full", lr_base=lr, warmup_steps=warmup, prompt_dropout=0.0,
                      seed=seed, checkpoint_every=0)
    t0 = time.perf_counter()
    result = train(model, corpus, cfg)
    log.info("base pre-training: %d iterations in %.0fs", iterations, time.perf_counter() - t0)
    model.set_base_trainable(False)
    return model, result


def fresh_base(ckpt: Checkpoint) -> FlowTransformer:
    model, _ = ckpt.build_model()
    lora.detach(model)
    model.set_base_trainable(False)
    return model


def restore_records(model: FlowTransformer, records, steps: int = 28, guidance: float = 2.5, seed: int = 0,
                    batch: int = 32) -> np.ndarray:
    """Restore model-resolution records in chunks; noise per record keyed by its position in ``records``."""
    outs = []
    vocab = model.text.vocab
    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        deg = np.stack([r.degraded for r in chunk])
        ids = [vocab.tokenize(r.prompt) for r in chunk]
        outs.append(restore_batch(model, deg, ids, steps, guidance, seed, indices=range(start, start + len(chunk))))
    return np.concatenate(outs)


def score(records, restored: np.ndarray, config: str, extractor: FeatureExtractor,
          bandwidth: float | None = None) -> tuple[list[MetricRow], dict]:
    clean = np.stack([r.clean for r in records])
    return score_images(restored, clean, [r.task for r in records], [r.sigma for r in records], config, extractor,
                        bandwidth)


def evaluate_model(model: FlowTransformer, eval_set: PairedDataset, config: str, steps: int = 28,
                   guidance: float = 2.5, seed: int = 0, extractor: FeatureExtractor | None = None,
                   bandwidth: float | None = None) -> list[MetricRow]:
    if eval_set.split != "eval":
        raise ValueError(f"evaluation needs the eval split, got {eval_set.split!r}")
    extractor = extractor or FeatureExtractor()
    restored = restore_records(model, eval_set.records, steps, guidance, seed)
    rows, _ = score(eval_set.records, restored, config, extractor, bandwidth)
    return rows


def degraded_floor(eval_set: PairedDataset, extractor: FeatureExtractor | None = None,
                   bandwidth: float | None = None) -> list[MetricRow]:
    """Metrics of the raw degraded inputs: the no-restoration floor."""
    extractor = extractor or FeatureExtractor()
    rows, _ = score(eval_set.records, np.stack([r.degraded for r in eval_set.records]), "degraded", extractor,
                    bandwidth)
    return rows


def report_meta(extractor: FeatureExtractor, bandwidth: float | None, sample: dict) -> dict:
    return {
        "extractor": {"kind": "random-conv", "seed": extractor.seed, "dim": extractor.dim},
        "mmd": {"estimator": "biased V-statistic",
                "bandwidth": "median pairwise distance of ground-truth features per row" if bandwidth is None else bandwidth},
        "fid": {"sqrtm": "symmetric eigendecomposition, negative eigenvalues clipped"},
        "sample": sample,
    }


@dataclass
class AdapterRun:
    label: str
    cfg: TrainConfig
    result: TrainResult
    rows: list[MetricRow] = field(default_factory=list)
    seconds: float = 0.0


def run_adapter(base: Checkpoint, train_set: PairedDataset, cfg: TrainConfig, eval_set: PairedDataset, label: str,
                steps: int = 28, guidance: float = 2.5, extractor: FeatureExtractor | None = None) -> AdapterRun:
    """Fresh adapter on a copy of the base, trained then evaluated on the tasks it was trained for."""
    model = fresh_base(base)
    t0 = time.perf_counter()
    result = train(model, train_set, cfg)
    if cfg.regime == "per-task":
        eval_set = eval_set.filter(cfg.task)
    rows = evaluate_model(model, eval_set, label, steps, guidance, seed=cfg.seed, extractor=extractor)
    return AdapterRun(label, cfg, result, rows, time.perf_counter() - t0)


def mean_task_psnr(rows: list[MetricRow], task: str) -> float:
    return next(r.psnr for r in rows if r.task == task and r.sigma is None)


def as_report(*row_lists: list[MetricRow], meta: dict | None = None) -> MetricReport:
    return MetricReport([r for rows in row_lists for r in rows], meta or {})


def default_eval_set(per_task: int = 12, image_size: int = 32) -> PairedDataset:
    return build_dataset(per_task, seed=EVAL_SEED, split="eval", image_size=image_size)
