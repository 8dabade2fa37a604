"""Low-rank adapters on attention projections: inject, merge/unmerge, save/load."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import container
from .model import QKV_SITE, FlowTransformer
from .tensor import Tensor

MAGIC = b"E2RA"
VERSION = 1
TASK_TAGS = ("noise", "rain", "haze", "unified")


class LoraError(ValueError):
    pass


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    task_tag: str
    sites: list[str]
    A: dict[str, Tensor] = field(default_factory=dict)  # (r, k)
    B: dict[str, Tensor] = field(default_factory=dict)  # (d, r)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for s in self.sites:
            out[f"{s}.lora_A"] = self.A[s]
            out[f"{s}.lora_B"] = self.B[s]
        return out

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def delta(self, site: str) -> np.ndarray:
        return self.scale * (self.B[site].data @ self.A[site].data)


def create(
    model: FlowTransformer,
    rank: int = 64,
    alpha: float | None = None,
    site_filter: re.Pattern | str | list[str] = QKV_SITE,
    task_tag: str = "unified",
    seed: int = 0,
) -> LoraAdapter:
    """New adapter with A ~ N(0, 0.02^2) and B = 0, so the initial update is zero."""
    if task_tag not in TASK_TAGS:
        raise LoraError(f"unknown task tag {task_tag!r}; expected one of {TASK_TAGS}")
    if isinstance(site_filter, list):
        unknown = [s for s in site_filter if s not in model.linear_sites]
        if unknown:
            raise LoraError(f"unknown site(s): {', '.join(unknown)}")
        sites = list(site_filter)
    else:
        sites = model.sites(site_filter)
    if not sites:
        raise LoraError("site filter matched no projection sites")
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter(rank, float(rank if alpha is None else alpha), task_tag, sites)
    for s in sites:
        d, k = model.params[f"{s}.weight"].shape
        if rank > min(d, k):
            raise LoraError(f"rank {rank} exceeds min(d, k) = {min(d, k)} at site {s}")
        adapter.A[s] = Tensor(rng.normal(0.0, 0.02, (rank, k)), requires_grad=True, name=f"{s}.lora_A")
        adapter.B[s] = Tensor(np.zeros((d, rank)), requires_grad=True, name=f"{s}.lora_B")
    return adapter


def _check_fits(adapter: LoraAdapter, model: FlowTransformer) -> None:
    for s in adapter.sites:
        key = f"{s}.weight"
        if key not in model.params:
            raise LoraError(f"unknown site {s!r}")
        d, k = model.params[key].shape
        a, b = adapter.A[s].shape, adapter.B[s].shape
        if a != (adapter.rank, k) or b != (d, adapter.rank):
            raise LoraError(f"dimension mismatch at {s}: weight {(d, k)} vs A {a}, B {b}")


def attach(model: FlowTransformer, adapter: LoraAdapter, freeze_base: bool = True) -> FlowTransformer:
    """Route every adapted site through W0 x + (alpha/r) B(Ax); the base weights are frozen."""
    _check_fits(adapter, model)
    if freeze_base:
        model.set_base_trainable(False)
    for s in adapter.sites:
        model.adapters[s] = (adapter.A[s], adapter.B[s], adapter.scale)
    return model


def inject(model: FlowTransformer, rank: int = 64, alpha: float | None = None,
           site_filter=QKV_SITE, task_tag: str = "unified", seed: int = 0) -> LoraAdapter:
    adapter = create(model, rank, alpha, site_filter, task_tag, seed)
    attach(model, adapter)
    return adapter


def detach(model: FlowTransformer) -> None:
    model.adapters.clear()


def merge(adapter: LoraAdapter, model: FlowTransformer) -> FlowTransformer:
    """Fold W <- W0 + (alpha/r) BA into the base weights and drop the adapter branch."""
    _check_fits(adapter, model)
    for s in adapter.sites:
        model.params[f"{s}.weight"].data += adapter.delta(s)
        model.adapters.pop(s, None)
    return model


def unmerge(adapter: LoraAdapter, model: FlowTransformer) -> FlowTransformer:
    _check_fits(adapter, model)
    for s in adapter.sites:
        model.params[f"{s}.weight"].data -= adapter.delta(s)
    return model


def save_adapter(adapter: LoraAdapter, path) -> int:
    header = {"rank": adapter.rank, "alpha": adapter.alpha, "task_tag": adapter.task_tag, "sites": adapter.sites}
    arrays = {name: p.data for name, p in adapter.parameters().items()}
    return container.write(path, MAGIC, VERSION, header, arrays)


def load_adapter(path) -> LoraAdapter:
    header, arrays = container.read(path, MAGIC, VERSION)
    adapter = LoraAdapter(int(header["rank"]), float(header["alpha"]), header["task_tag"], list(header["sites"]))
    for s in adapter.sites:
        try:
            adapter.A[s] = Tensor(arrays[f"{s}.lora_A"], requires_grad=True, name=f"{s}.lora_A")
            adapter.B[s] = Tensor(arrays[f"{s}.lora_B"], requires_grad=True, name=f"{s}.lora_B")
        except KeyError as exc:
            raise container.CorruptFileError(f"missing payload {exc}", 0) from None
    return adapter
