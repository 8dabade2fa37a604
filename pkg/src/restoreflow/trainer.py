"""Training loop: two-group AdamW, linear warmup then constant LR, checkpoints and CSV loss log."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container
from . import lora as lora_mod
from . import tensor as T
from .flow import TimestepSampler, flow_loss, make_batch
from .model import FlowTransformer, ModelConfig
from .sampler import NumericalError, to_latent
from .tensor import Tensor
from .text import PromptVocab, TASKS

log = logging.getLogger(__name__)

MAGIC = b"E2RC"
VERSION = 1
LOG_COLUMNS = ("iteration", "loss", "lr_lora", "lr_text", "clipped")


@dataclass
class TrainConfig:
    iterations: int = 1920
    batch_size: int = 4
    lr_lora: float = 1e-4
    lr_text: float = 5e-6
    wd_lora: float = 1e-4
    wd_text: float = 1e-3
    warmup_steps: int = 500
    rank: int = 64
    alpha: float | None = None
    regime: str = "unified"  # unified | per-task
    task: str | None = None  # required for per-task
    text_encoder_trainable: bool = False
    prompt_dropout: float = 0.10
    timestep_mu: float = 0.0
    timestep_sigma: float = 1.0
    grad_clip: float = 1.0
    checkpoint_every: int = 100
    target: str = "lora"  # lora | full (full = base pre-training, every transformer weight trains)
    lr_base: float = 1e-3
    wd_base: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0 <= self.warmup_steps <= self.iterations:
            raise ValueError(f"warmup_steps {self.warmup_steps} must lie in [0, iterations={self.iterations}]")
        if min(self.lr_lora, self.lr_text, self.lr_base) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.regime not in ("unified", "per-task"):
            raise ValueError(f"regime must be 'unified' or 'per-task', got {self.regime!r}")
        if self.regime == "per-task" and self.task not in TASKS:
            raise ValueError(f"per-task regime needs task in {TASKS}, got {self.task!r}")
        if self.target not in ("lora", "full"):
            raise ValueError(f"target must be 'lora' or 'full', got {self.target!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def lr_at(step: int, warmup: int, base_lr: float) -> float:
    """Linear ramp to ``base_lr`` over ``warmup`` steps (1-based), constant afterwards."""
    if step < 1:
        raise ValueError("step counts from 1")
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * step / warmup


def iteration_accounting(n_images: int, batch_size: int, iterations: int, n_tasks: int) -> dict:
    per_epoch = n_images / batch_size
    return {
        "images": n_images,
        "iterations_per_epoch": per_epoch,
        "epochs": iterations / per_epoch,
        "iterations_per_task": iterations / max(n_tasks, 1),
    }


# ---------------------------------------------------------------- optimizer


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place AdamW update; ``state`` holds ``step`` plus per-name ``m`` and ``v``."""
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    bc1, bc2 = 1.0 - beta1**t, 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if name not in m:
            m[name] = np.zeros(p.shape)
            v[name] = np.zeros(p.shape)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    lr: float
    wd: float
    state: dict = field(default_factory=dict)


def clip_global_norm(groups: list[ParamGroup], max_norm: float) -> tuple[float, bool]:
    sq = 0.0
    for g in groups:
        for p in g.params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in groups:
            for p in g.params.values():
                if p.grad is not None:
                    p.grad *= factor
        return norm, True
    return norm, False


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocab: PromptVocab
    model: dict[str, np.ndarray]
    text: dict[str, np.ndarray]
    adapter_meta: dict | None
    adapter: dict[str, np.ndarray]
    optimizer: dict  # group name -> {"step", "m", "v"}
    iteration: int
    rng_state: dict
    log_rows: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build_model(self) -> tuple[FlowTransformer, lora_mod.LoraAdapter | None]:
        model = FlowTransformer(self.model_config, vocab=self.vocab)
        model.load_state_arrays(self.model)
        for k, p in model.text.parameters().items():
            p.data = self.text[k].copy()
        adapter = None
        if self.adapter_meta is not None:
            meta = self.adapter_meta
            adapter = lora_mod.LoraAdapter(meta["rank"], meta["alpha"], meta["task_tag"], list(meta["sites"]))
            for s in adapter.sites:
                adapter.A[s] = Tensor(self.adapter[f"{s}.lora_A"], requires_grad=True, name=f"{s}.lora_A")
                adapter.B[s] = Tensor(self.adapter[f"{s}.lora_B"], requires_grad=True, name=f"{s}.lora_B")
            lora_mod.attach(model, adapter)
        return model, adapter


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    arrays: dict[str, np.ndarray] = {}
    for k, v in ckpt.model.items():
        arrays[f"model/{k}"] = v
    for k, v in ckpt.text.items():
        arrays[f"text/{k}"] = v
    for k, v in ckpt.adapter.items():
        arrays[f"lora/{k}"] = v
    opt_header = {}
    for gname, st in ckpt.optimizer.items():
        opt_header[gname] = {"step": int(st.get("step", 0)), "names": sorted(st.get("m", {}))}
        for k in opt_header[gname]["names"]:
            arrays[f"opt/{gname}/m/{k}"] = st["m"][k]
            arrays[f"opt/{gname}/v/{k}"] = st["v"][k]
    header = {
        "model_config": ckpt.model_config.to_json(),
        "train_config": ckpt.train_config.to_json(),
        "vocab": ckpt.vocab.to_json(),
        "adapter": ckpt.adapter_meta,
        "optimizer": opt_header,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "log_rows": ckpt.log_rows,
        "extra": ckpt.extra,
    }
    return container.write(path, MAGIC, VERSION, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = container.read(path, MAGIC, VERSION)

    def section(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    optimizer = {}
    for gname, meta in header["optimizer"].items():
        optimizer[gname] = {
            "step": meta["step"],
            "m": {k: arrays[f"opt/{gname}/m/{k}"] for k in meta["names"]},
            "v": {k: arrays[f"opt/{gname}/v/{k}"] for k in meta["names"]},
        }
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig.from_json(header["train_config"]),
        vocab=PromptVocab.from_json(header["vocab"]),
        model=section("model/"),
        text=section("text/"),
        adapter_meta=header["adapter"],
        adapter=section("lora/"),
        optimizer=optimizer,
        iteration=int(header["iteration"]),
        rng_state=header["rng_state"],
        log_rows=header.get("log_rows", []),
        extra=header.get("extra", {}),
    )


# ---------------------------------------------------------------- training


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["iteration"], repr(float(r["loss"])), repr(float(r["lr_lora"])), repr(float(r["lr_text"])),
                     int(r["clipped"])])
    return buf.getvalue()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list[dict]
    adapter: lora_mod.LoraAdapter | None
    model: FlowTransformer

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def select_pool(records, cfg: TrainConfig):
    if cfg.regime == "per-task":
        return [r for r in records if r.task == cfg.task]
    return list(records)


def train(model: FlowTransformer, dataset, cfg: TrainConfig, adapter: lora_mod.LoraAdapter | None = None,
          resume: Checkpoint | None = None, checkpoint_path=None, log_path=None, extra: dict | None = None) -> TrainResult:
    """Run (or resume) the training loop and return the final checkpoint plus loss log.

    ``dataset`` is anything iterable over records with ``clean``, ``degraded``,
    ``prompt`` and ``task`` fields. With ``target="lora"`` an adapter is
    created (or reused) and only its factors, plus the text embedder when
    trainable, receive updates.
    """
    records = select_pool(getattr(dataset, "records", dataset), cfg)
    if not records:
        raise ValueError(f"no training records for regime={cfg.regime} task={cfg.task}")
    vocab = model.text.vocab
    clean = to_latent(np.stack([r.clean for r in records]))
    context = to_latent(np.stack([r.degraded for r in records]))
    ids = np.array([vocab.tokenize(r.prompt) for r in records], dtype=np.int64)
    acct = iteration_accounting(len(records), cfg.batch_size, cfg.iterations, len({r.task for r in records}))
    log.info("training on %d records (%s); %.1f iterations/epoch, %.1f epochs, %.1f iterations/task",
             len(records), cfg.regime, acct["iterations_per_epoch"], acct["epochs"], acct["iterations_per_task"])
    log.info("text-embedder: %s", "trainable" if cfg.text_encoder_trainable else "frozen")

    model.text.set_trainable(cfg.text_encoder_trainable)
    groups: list[ParamGroup] = []
    if cfg.target == "full":
        lora_mod.detach(model)
        model.set_base_trainable(True)
        groups.append(ParamGroup("base", dict(model.params), cfg.lr_base, cfg.wd_base))
    else:
        if adapter is None:
            tag = cfg.task if cfg.regime == "per-task" else "unified"
            adapter = lora_mod.create(model, cfg.rank, cfg.alpha, task_tag=tag, seed=cfg.seed)
        lora_mod.attach(model, adapter)
        groups.append(ParamGroup("lora", adapter.parameters(), cfg.lr_lora, cfg.wd_lora))
    if cfg.text_encoder_trainable:
        groups.append(ParamGroup("text", model.text.parameters(), cfg.lr_text, cfg.wd_text))

    rng = np.random.default_rng(cfg.seed)
    rows: list[dict] = []
    start = 0
    if resume is not None:
        start = resume.iteration
        rng.bit_generator.state = resume.rng_state
        rows = [dict(r) for r in resume.log_rows]
        for g in groups:
            st = resume.optimizer.get(g.name)
            if st is not None:
                g.state = {"step": st["step"], "m": {k: v.copy() for k, v in st["m"].items()},
                           "v": {k: v.copy() for k, v in st["v"].items()}}
    sampler = TimestepSampler(cfg.timestep_mu, cfg.timestep_sigma)
    trainable = [p for g in groups for p in g.params.values()]

    def snapshot(iteration: int) -> Checkpoint:
        return Checkpoint(
            model_config=model.cfg,
            train_config=cfg,
            vocab=vocab,
            model=model.state_arrays(),
            text={k: p.data.copy() for k, p in model.text.parameters().items()},
            adapter_meta=None if adapter is None or cfg.target == "full" else
            {"rank": adapter.rank, "alpha": adapter.alpha, "task_tag": adapter.task_tag, "sites": adapter.sites},
            adapter={} if adapter is None or cfg.target == "full" else {k: p.data.copy() for k, p in adapter.parameters().items()},
            optimizer={g.name: {"step": g.state.get("step", 0), "m": {k: v.copy() for k, v in g.state.get("m", {}).items()},
                                "v": {k: v.copy() for k, v in g.state.get("v", {}).items()}} for g in groups},
            iteration=iteration,
            rng_state=rng.bit_generator.state,
            log_rows=[dict(r) for r in rows],
            extra=dict(extra or {}),
        )

    for it in range(start + 1, cfg.iterations + 1):
        idx = rng.integers(len(records), size=cfg.batch_size)
        batch = make_batch(clean[idx], sampler, rng)
        batch_ids = ids[idx].copy()
        drop = rng.random(cfg.batch_size) < cfg.prompt_dropout
        batch_ids[drop] = 0

        for p in trainable:
            p.grad = None
        v_pred = model(batch.z_t, context[idx], batch_ids, batch.t)
        loss = flow_loss(v_pred, batch.v_target)
        value = float(loss.data)
        if not math.isfinite(value):
            manifest = [(int(i), records[i].task, records[i].prompt) for i in idx]
            raise NumericalError(f"non-finite loss at iteration {it}; batch {manifest}")
        T.backward(loss)
        _, clipped = clip_global_norm(groups, cfg.grad_clip)
        if clipped:
            log.debug("iteration %d: gradient clipped", it)
        lrs = {}
        for g in groups:
            lr = lr_at(it, cfg.warmup_steps, g.lr)
            lrs[g.name] = lr
            grads = {k: p.grad for k, p in g.params.items() if p.grad is not None}
            adamw_step(g.params, grads, g.state, lr, g.wd)
        rows.append({
            "iteration": it,
            "loss": value,
            "lr_lora": lrs.get("lora", lrs.get("base", 0.0)),
            "lr_text": lrs.get("text", 0.0),
            "clipped": bool(clipped),
        })
        if checkpoint_path is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(it), checkpoint_path)

    for p in trainable:
        p.grad = None
    final = snapshot(cfg.iterations)
    if checkpoint_path is not None:
        save_checkpoint(final, checkpoint_path)
    if log_path is not None:
        Path(log_path).write_text(format_log(rows))
    return TrainResult(final, rows, adapter if cfg.target == "lora" else None, model)
