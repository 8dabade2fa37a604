"""PSNR/SSIM plus distribution distances (Frechet, RBF-kernel MMD) over fixed random-conv features."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
REPORT_COLUMNS = ("config", "task", "sigma", "n", "fid", "mmd", "psnr", "ssim")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over all ``window`` x ``window`` windows (stride 1) of the channel-mean images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


class FeatureExtractor:
    """Frozen random conv stack: three 3x3 stride-2 convs with tanh, then global average pooling."""

    def __init__(self, seed: int = 0, channels=(3, 16, 32, 64)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.layers = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(9 * cin), (3, 3, cin, cout))
            b = rng.normal(0.0, 0.1, cout)
            self.layers.append((w, b))
        self.dim = channels[-1]

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = 2.0 * np.asarray(images, dtype=np.float64) - 1.0
        if x.ndim == 3:
            x = x[None]
        for w, b in self.layers:
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
            patches = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]  # (B, H', W', C, 3, 3)
            x = np.tanh(np.einsum("bhwcij,ijco->bhwo", patches, w) + b)
        return x.mean(axis=(1, 2))


def _clip_roundoff(evals: np.ndarray) -> np.ndarray:
    # eigenvalues at round-off level are treated as exact zeros (rank-deficient covariances);
    # otherwise their square roots (~1e-8 each) accumulate into the trace
    tol = max(float(evals.max(initial=0.0)), 0.0) * len(evals) * np.finfo(np.float64).eps
    return np.where(evals > tol, evals, 0.0)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root uses the symmetric form S_a^(1/2) S_b S_a^(1/2),
    whose eigenvalues match those of S_a S_b; negative and round-off-level
    eigenvalues are clipped to 0.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, dtype=np.float64)), np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, dtype=np.float64)), np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    evals, evecs = np.linalg.eigh((cov_a + cov_a.T) / 2)
    root_a = (evecs * np.sqrt(_clip_roundoff(evals))) @ evecs.T
    mid = root_a @ cov_b @ root_a
    mid_evals = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(_clip_roundoff(mid_evals))))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    feats_a, feats_b = np.atleast_2d(feats_a), np.atleast_2d(feats_b)
    dim = feats_a.shape[1]
    if min(len(feats_a), len(feats_b)) <= dim:
        warnings.warn(f"Frechet distance with {len(feats_a)}/{len(feats_b)} samples in {dim} dims; "
                      "covariances are rank-deficient", RuntimeWarning, stacklevel=2)
    return frechet_from_moments(feats_a.mean(0), np.cov(feats_a, rowvar=False, bias=False).reshape(dim, dim),
                                feats_b.mean(0), np.cov(feats_b, rowvar=False, bias=False).reshape(dim, dim))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.clip(d, 0.0, None)


def median_bandwidth(feats_a: np.ndarray, feats_b: np.ndarray | None = None) -> float:
    """Median non-zero pairwise distance over the pooled sets."""
    pooled = feats_a if feats_b is None else np.concatenate([feats_a, feats_b])
    d = np.sqrt(_sq_dists(pooled, pooled))
    off = d[np.triu_indices(len(pooled), k=1)]
    off = off[off > 0]
    return float(np.median(off)) if off.size else 1.0


def mmd_rbf(feats_a: np.ndarray, feats_b: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with k(x, y) = exp(-||x - y||^2 / (2 bw^2))."""
    feats_a, feats_b = np.atleast_2d(np.asarray(feats_a, float)), np.atleast_2d(np.asarray(feats_b, float))
    bw = median_bandwidth(feats_a, feats_b) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise ValueError("bandwidth must be > 0")
    gamma = 1.0 / (2.0 * bw * bw)
    kaa = np.exp(-gamma * _sq_dists(feats_a, feats_a)).mean()
    kbb = np.exp(-gamma * _sq_dists(feats_b, feats_b)).mean()
    kab = np.exp(-gamma * _sq_dists(feats_a, feats_b)).mean()
    return float(kaa + kbb - 2.0 * kab)


# ---------------------------------------------------------------- reports


@dataclass
class MetricRow:
    config: str
    task: str
    sigma: float | None
    n: int
    fid: float
    mmd: float
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def get(self, config: str, task: str, sigma=None) -> MetricRow:
        for r in self.rows:
            if r.config == config and r.task == task and r.sigma == sigma:
                return r
        raise KeyError((config, task, sigma))

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            sigma = "" if r.sigma is None else f"{r.sigma:g}"
            lines.append(f"{r.config},{r.task},{sigma},{r.n},{r.fid!r},{r.mmd!r},{r.psnr!r},{r.ssim!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path) -> MetricReport:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(MetricRow(rec["config"], rec["task"], float(rec["sigma"]) if rec["sigma"] else None,
                                      int(rec["n"]), float(rec["fid"]), float(rec["mmd"]), float(rec["psnr"]),
                                      float(rec["ssim"])))
        return cls(rows)


def group_keys(tasks, sigmas) -> list[tuple[str, float | None]]:
    """Report rows: one per task, plus one per sigma level for the noise task."""
    keys = []
    for task in dict.fromkeys(tasks):
        keys.append((task, None))
        if task == "noise":
            keys += [(task, float(s)) for s in sorted({s for t, s in zip(tasks, sigmas) if t == "noise"})]
    return keys


def score_images(restored: np.ndarray, clean: np.ndarray, tasks, sigmas, config: str,
                 extractor: FeatureExtractor, bandwidth: float | None = None) -> tuple[list[MetricRow], dict]:
    """Per-group metric rows for already-restored images; returns rows and the bandwidths used.

    Unless given, each group's MMD bandwidth is the median pairwise distance of
    its ground-truth features, so rows from different configs share a kernel.
    """
    restored, clean = np.asarray(restored), np.asarray(clean)
    tasks, sigmas = list(tasks), list(sigmas)
    feats_r, feats_c = extractor(restored), extractor(clean)
    rows, bandwidths = [], {}
    for task, sigma in group_keys(tasks, sigmas):
        sel = [i for i, (t, s) in enumerate(zip(tasks, sigmas)) if t == task and (sigma is None or s == sigma)]
        fr, fc = feats_r[sel], feats_c[sel]
        bw = median_bandwidth(fc) if bandwidth is None else bandwidth
        bandwidths[f"{task}:{'' if sigma is None else int(sigma)}"] = bw
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fid = frechet_distance(fr, fc) if len(sel) > 1 else float("nan")
        rows.append(MetricRow(
            config=config, task=task, sigma=sigma, n=len(sel),
            fid=fid, mmd=mmd_rbf(fr, fc, bw),
            psnr=float(np.mean([psnr(restored[i], clean[i]) for i in sel])),
            ssim=float(np.mean([ssim(restored[i], clean[i]) for i in sel])),
        ))
    return rows, bandwidths
