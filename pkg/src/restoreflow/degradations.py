"""Procedural clean images, synthetic degradations and the few-shot paired dataset."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import erf

from .imageio import read_image, write_image
from .text import TASKS, task_prompt

NOISE_SIGMAS = (15, 25, 50)
PAPER_POOL_SIZES = (16, 32, 64, 128)
SPLITS = {"train": 0, "eval": 1, "pretrain": 2}


# ---------------------------------------------------------------- clean corpus


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def procedural_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth gradient background, a few soft-edged shapes and a low-amplitude texture field."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = _smoothstep(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)))
    c0, c1 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]

    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.0, 1.0, 3)
        cx, cy = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.1, 0.3)
        soft = 1.5 / size
        if rng.random() < 0.5:
            dist = np.hypot(xx - cx, yy - cy) - r
        else:
            hw, hh = rng.uniform(0.08, 0.3, 2)
            dist = np.maximum(np.abs(xx - cx) - hw, np.abs(yy - cy) - hh)
        mask = _smoothstep(0.5 - dist / (2 * soft))[..., None]
        img = img * (1 - mask) + color * mask

    texture = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(1.5, 1.5, 0))
    img = img + rng.uniform(0.0, 0.06) * texture / (texture.std() + 1e-12)
    return np.clip(img, 0.0, 1.0)


def smooth_depth(size: int, rng: np.random.Generator, max_depth: float = 3.0) -> np.ndarray:
    """Low-frequency Gaussian-mixture field normalized to [0, max_depth]."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    field_ = rng.uniform(0.5, 1.5) * (1.0 - yy)  # far at the top, like outdoor scenes
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0, 1, 2)
        width = rng.uniform(0.2, 0.5)
        field_ += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
    field_ -= field_.min()
    peak = field_.max()
    return max_depth * field_ / peak if peak > 0 else np.zeros_like(field_)


# ---------------------------------------------------------------- degradations


def degrade_noise(clean: np.ndarray, sigma: float, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
    """Additive Gaussian noise with ``sigma`` on the 0-255 scale."""
    if sigma == 0:
        return np.array(clean, dtype=np.float64)
    out = clean + rng.normal(0.0, sigma / 255.0, np.shape(clean))
    return np.clip(out, 0.0, 1.0) if clamp else out


def degrade_haze(clean: np.ndarray, beta: float, airlight: float, depth: np.ndarray) -> np.ndarray:
    """Atmospheric scattering I = J t + A (1 - t), t = exp(-beta * depth)."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative")
    tau = np.exp(-beta * depth)
    if clean.ndim == 3:
        tau = tau[..., None]
    return np.clip(clean * tau + airlight * (1.0 - tau), 0.0, 1.0)


@dataclass
class RainSpec:
    count: int = 40
    length: float = 8.0
    angle_deg: float = 90.0  # 90 = vertical
    jitter_deg: float = 4.0
    intensity: float = 0.6
    blur: float = 0.8  # Gaussian std along the streak axis, pixels
    width: float = 0.5  # Gaussian std across the streak, pixels


def rain_layer(size: tuple[int, int], spec: RainSpec, rng: np.random.Generator) -> np.ndarray:
    """Streak intensity map in [0, 1]: box segments convolved with a Gaussian along their axis."""
    h, w = size
    layer = np.zeros((h, w))
    if spec.count <= 0:
        return layer
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    blur = max(spec.blur, 1e-6)
    for _ in range(int(spec.count)):
        theta = math.radians(spec.angle_deg + rng.uniform(-spec.jitter_deg, spec.jitter_deg))
        ux, uy = math.cos(theta), math.sin(theta)
        x0, y0 = rng.uniform(-spec.length / 2, w), rng.uniform(-spec.length, h)
        length = spec.length * rng.uniform(0.7, 1.3)
        # along/across coordinates relative to the streak start
        s = (xx - x0) * ux + (yy - y0) * uy
        n = -(xx - x0) * uy + (yy - y0) * ux
        along = 0.5 * (erf(s / (math.sqrt(2) * blur)) - erf((s - length) / (math.sqrt(2) * blur)))
        across = np.exp(-0.5 * (n / spec.width) ** 2)
        layer = np.maximum(layer, along * across * rng.uniform(0.6, 1.0))
    return np.clip(layer * spec.intensity, 0.0, 1.0)


def degrade_rain(clean: np.ndarray, spec: RainSpec, rng: np.random.Generator) -> np.ndarray:
    """Screen-blend bright streaks: 1 - (1 - clean)(1 - s), written as clean + s (1 - clean) so out >= clean exactly."""
    if spec.count <= 0:
        return np.array(clean, dtype=np.float64)
    layer = rain_layer(clean.shape[:2], spec, rng)
    if clean.ndim == 3:
        layer = layer[..., None]
    return np.clip(clean + layer * (1.0 - clean), 0.0, 1.0)


@dataclass
class DegradationSpec:
    kind: str
    sigma: float | None = None
    rain: RainSpec | None = None
    beta: float | None = None
    airlight: float | None = None
    depth_seed: int | None = None

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown degradation {self.kind!r}; expected one of {{{', '.join(TASKS)}}}")

    def apply(self, clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "noise":
            return degrade_noise(clean, self.sigma, rng)
        if self.kind == "rain":
            return degrade_rain(clean, self.rain, rng)
        depth = smooth_depth(clean.shape[0], np.random.default_rng(self.depth_seed))
        return degrade_haze(clean, self.beta, self.airlight, depth)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "noise":
            out["sigma"] = self.sigma
        elif self.kind == "rain":
            out["rain"] = asdict(self.rain)
        else:
            out.update(beta=self.beta, airlight=self.airlight, depth_seed=self.depth_seed)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> DegradationSpec:
        obj = dict(obj)
        if obj.get("rain") is not None:
            obj["rain"] = RainSpec(**obj["rain"])
        return cls(**obj)


def random_spec(kind: str, rng: np.random.Generator, sigma: float | None = None) -> DegradationSpec:
    if kind == "noise":
        return DegradationSpec("noise", sigma=float(sigma if sigma is not None else rng.choice(NOISE_SIGMAS)))
    if kind == "rain":
        spec = RainSpec(
            count=int(rng.integers(25, 45)),
            length=float(rng.uniform(6, 12)),
            angle_deg=float(rng.uniform(70, 110)),
            intensity=float(rng.uniform(0.5, 0.8)),
        )
        return DegradationSpec("rain", rain=spec)
    if kind == "haze":
        return DegradationSpec("haze", beta=float(rng.uniform(0.3, 0.8)), airlight=float(rng.uniform(0.7, 1.0)),
                               depth_seed=int(rng.integers(2**31)))
    raise ValueError(f"unknown degradation {kind!r}; expected one of {{{', '.join(TASKS)}}}")


# ---------------------------------------------------------------- datasets


@dataclass
class Record:
    clean: np.ndarray
    degraded: np.ndarray
    prompt: str
    task: str
    spec: DegradationSpec
    index: int
    split: str = "train"

    @property
    def sigma(self) -> float | None:
        return self.spec.sigma if self.task == "noise" else None


@dataclass
class PairedDataset:
    records: list[Record]
    n_per_task: int
    tasks: tuple[str, ...]
    seed: int
    image_size: int
    split: str = "train"
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def filter(self, task: str) -> PairedDataset:
        return PairedDataset([r for r in self.records if r.task == task], self.n_per_task, (task,), self.seed,
                             self.image_size, self.split, list(self.notes))

    def counts(self) -> dict[str, int]:
        return {t: sum(r.task == t for r in self.records) for t in self.tasks}


def record_rng(seed: int, split: str, task: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], TASKS.index(task), index])


def make_record(seed: int, split: str, task: str, index: int, image_size: int) -> Record:
    rng = record_rng(seed, split, task, index)
    clean = procedural_image(image_size, rng)
    sigma = NOISE_SIGMAS[index % len(NOISE_SIGMAS)] if task == "noise" else None
    spec = random_spec(task, rng, sigma)
    return Record(clean, spec.apply(clean, rng), task_prompt(task), task, spec, index, split)


def build_dataset(n_per_task: int, tasks=TASKS, seed: int = 0, split: str = "train", image_size: int = 32) -> PairedDataset:
    """Deterministic few-shot pairs; noise records cycle through sigma 15/25/50; records shuffled."""
    tasks = tuple(tasks)
    for t in tasks:
        if t not in TASKS:
            raise ValueError(f"unknown task {t!r}; expected one of {{{', '.join(TASKS)}}}")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    notes = [] if n_per_task in PAPER_POOL_SIZES else [f"n_per_task={n_per_task} is not one of {PAPER_POOL_SIZES}"]
    records = [make_record(seed, split, t, i, image_size) for t in tasks for i in range(n_per_task)]
    order = np.random.default_rng([seed, SPLITS[split], 99]).permutation(len(records))
    return PairedDataset([records[i] for i in order], n_per_task, tasks, seed, image_size, split, notes)


def build_generic_corpus(n: int, seed: int = 0, image_size: int = 32) -> PairedDataset:
    """Prompt-free pairs for base pre-training: identity copies plus mild blur and/or mild noise.

    Uses its own split of the procedural generator, so no clean image is shared
    with the few-shot train/eval splits. The mild noise (sigma 2-8 on the 0-255
    scale) sits well below the few-shot noise levels.
    """
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, SPLITS["pretrain"], i])
        clean = procedural_image(image_size, rng)
        degraded = clean.copy()
        if i % 4 in (1, 3):
            degraded = gaussian_filter(degraded, sigma=(rng.uniform(0.5, 1.0),) * 2 + (0,))
        if i % 4 in (2, 3):
            degraded = degrade_noise(degraded, rng.uniform(2.0, 8.0), rng)
        records.append(Record(clean, degraded, "", "generic", None, i, "pretrain"))
    return PairedDataset(records, n, ("generic",), seed, image_size, "pretrain")


# ---------------------------------------------------------------- dataset directories

MANIFEST_VERSION = 1


def write_dataset_dir(out_dir, datasets: list[PairedDataset]) -> dict:
    """Materialize clean/ and degraded/ PPM files plus manifest.json for the given splits."""
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        for r in ds.records:
            stem = f"{r.split}_{r.task}_{r.index:04d}.ppm"
            write_image(out / "clean" / stem, r.clean)
            write_image(out / "degraded" / stem, r.degraded)
            entries.append({
                "id": stem[:-4],
                "split": r.split,
                "task": r.task,
                "prompt": r.prompt,
                "clean": f"clean/{stem}",
                "degraded": f"degraded/{stem}",
                "sigma": r.sigma,
                "spec": r.spec.to_json(),
            })
    first = datasets[0]
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": first.seed,
        "image_size": first.image_size,
        "tasks": list(first.tasks),
        "n_per_task": {ds.split: ds.n_per_task for ds in datasets},
        "notes": sorted({n for ds in datasets for n in ds.notes}),
        "records": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset_dir(root, split: str = "train") -> PairedDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    records = []
    for e in manifest["records"]:
        if e["split"] != split:
            continue
        index = int(e["id"].rsplit("_", 1)[1])
        records.append(Record(read_image(root / e["clean"]), read_image(root / e["degraded"]), e["prompt"],
                              e["task"], DegradationSpec.from_json(e["spec"]), index, split))
    return PairedDataset(records, manifest["n_per_task"].get(split, 0), tuple(manifest["tasks"]),
                         manifest["seed"], manifest["image_size"], split, manifest.get("notes", []))
