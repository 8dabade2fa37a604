"""Velocity-prediction transformer: dual-stream then single-stream joint attention.

Token layout is sequence-first, ``(tokens, batch, d_model)``, so per-sample
modulation vectors of shape ``(batch, d_model)`` broadcast over the leading
token axis. The image stream carries the noisy tokens followed by the
context (degraded image) tokens; the text stream carries prompt tokens.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .text import PromptVocab, TextEmbedder


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    d_model: int = 64
    heads: int = 4
    n_double_blocks: int = 2
    n_single_blocks: int = 2
    text_len: int = 8
    mlp_ratio: int = 2
    time_dim: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def seq_len(self) -> int:
        return 2 * self.n_patches + self.text_len

    def to_json(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (N, B, p*p*C) with patches in row-major grid order."""
    b, h, w, c = images.shape
    p = patch_size
    g_h, g_w = h // p, w // p
    x = images.reshape(b, g_h, p, g_w, p, c).transpose(1, 3, 0, 2, 4, 5)
    return x.reshape(g_h * g_w, b, p * p * c).copy()


def unpatchify(tokens: np.ndarray, patch_size: int, image_size: int, channels: int = 3) -> np.ndarray:
    n, b, _ = tokens.shape
    p, g = patch_size, image_size // patch_size
    x = tokens.reshape(g, g, b, p, p, channels).transpose(2, 0, 3, 1, 4, 5)
    return x.reshape(b, image_size, image_size, channels).copy()


def _unpatchify_tensor(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    n, b, _ = tokens.shape
    p, g, c = cfg.patch_size, cfg.grid, cfg.channels
    x = T.reshape(tokens, (g, g, b, p, p, c))
    x = T.transpose(x, (2, 0, 3, 1, 4, 5))
    return T.reshape(x, (b, cfg.image_size, cfg.image_size, c))


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; returns (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


# large enough that position-matched noisy/context attention is found early in pre-training
POS_STD = 0.5
QKV_SITE = re.compile(r"(^|[._])(q|k|v)$")
QKVO_SITE = re.compile(r"(^|[._])(q|k|v|o)$")


class FlowTransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, vocab: PromptVocab | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.linear_sites: list[str] = []
        self.adapters: dict[str, tuple[Tensor, Tensor, float]] = {}
        self.text = TextEmbedder(vocab or PromptVocab(max_len=cfg.text_len), cfg.d_model, rng)
        d, hid = cfg.d_model, cfg.mlp_ratio * cfg.d_model

        self._add_linear("img_in", d, cfg.patch_dim, rng)
        self._add("pos_row", _trunc_normal(rng, (cfg.grid, d), POS_STD))
        self._add("pos_col", _trunc_normal(rng, (cfg.grid, d), POS_STD))
        self._add("ctx_marker", _trunc_normal(rng, (d,)))
        self._add_linear("txt_in", d, d, rng)
        self._add_linear("time_in.fc1", d, cfg.time_dim, rng)
        self._add_linear("time_in.fc2", d, d, rng)
        for i in range(cfg.n_double_blocks):
            for s in ("img", "txt"):
                pre = f"double_blocks.{i}.{s}"
                self._add_linear(f"{pre}_mod", 6 * d, d, rng, zero=True)
                for proj in ("q", "k", "v", "o"):
                    self._add_linear(f"{pre}_{proj}", d, d, rng)
                self._add_linear(f"{pre}_mlp1", hid, d, rng)
                self._add_linear(f"{pre}_mlp2", d, hid, rng)
        for i in range(cfg.n_single_blocks):
            pre = f"single_blocks.{i}"
            self._add_linear(f"{pre}.mod", 3 * d, d, rng, zero=True)
            for proj in ("q", "k", "v", "o"):
                self._add_linear(f"{pre}.{proj}", d, d, rng)
            self._add_linear(f"{pre}.mlp1", hid, d, rng)
            self._add_linear(f"{pre}.mlp2", d, hid, rng)
        self._add_linear("final.mod", 2 * d, d, rng, zero=True)
        self._add_linear("final.out", cfg.patch_dim, d, rng, zero=True)

    # ------------------------------------------------------------ parameters

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _add_linear(self, site: str, d_out: int, d_in: int, rng, zero: bool = False) -> None:
        w = np.zeros((d_out, d_in)) if zero else _trunc_normal(rng, (d_out, d_in))
        self._add(f"{site}.weight", w)
        self._add(f"{site}.bias", np.zeros(d_out))
        self.linear_sites.append(site)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def set_base_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def sites(self, pattern: re.Pattern | str = QKV_SITE) -> list[str]:
        pat = re.compile(pattern) if isinstance(pattern, str) else pattern
        return [s for s in self.linear_sites if pat.search(s)]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # ------------------------------------------------------------ layers

    def linear(self, x: Tensor, site: str) -> Tensor:
        out = T.linear(x, self.params[f"{site}.weight"], self.params[f"{site}.bias"])
        adapter = self.adapters.get(site)
        if adapter is not None:
            a, b, scale = adapter
            delta = T.linear(T.linear(x, a), b)
            out = T.add(out, T.scale(delta, scale) if scale != 1.0 else delta)
        return out

    @staticmethod
    def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return T.add(T.mul(T.layernorm(x), T.add(scale, 1.0)), shift)

    def _heads(self, x: Tensor) -> Tensor:
        n, b, d = x.shape
        h = self.cfg.heads
        return T.transpose(T.reshape(x, (n, b, h, d // h)), (1, 2, 0, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return T.reshape(T.transpose(x, (2, 0, 1, 3)), (n, b, h * dh))

    def attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Scaled dot-product attention on (tokens, batch, d) inputs."""
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        dh = qh.shape[-1]
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        return self._merge_heads(T.matmul(T.softmax(scores, axis=-1), vh))

    def _double_block(self, i: int, img: Tensor, txt: Tensor, svec: Tensor) -> tuple[Tensor, Tensor]:
        mods = {}
        qkv = {}
        for s, x in (("img", img), ("txt", txt)):
            pre = f"double_blocks.{i}.{s}"
            m = T.split(self.linear(svec, f"{pre}_mod"), 6, axis=-1)
            mods[s] = m
            h = self._modulate(x, m[0], m[1])
            qkv[s] = [self.linear(h, f"{pre}_{p}") for p in ("q", "k", "v")]
        n_txt = txt.shape[0]
        joint = [T.concat([qkv["txt"][j], qkv["img"][j]], axis=0) for j in range(3)]
        att = self.attention(*joint)
        parts = {"txt": T.take(att, 0, n_txt), "img": T.take(att, n_txt, att.shape[0])}
        out = {}
        for s, x in (("img", img), ("txt", txt)):
            pre = f"double_blocks.{i}.{s}"
            m = mods[s]
            x = T.add(x, T.mul(self.linear(parts[s], f"{pre}_o"), m[2]))
            h = self._modulate(x, m[3], m[4])
            h = self.linear(T.gelu(self.linear(h, f"{pre}_mlp1")), f"{pre}_mlp2")
            out[s] = T.add(x, T.mul(h, m[5]))
        return out["img"], out["txt"]

    def _single_block(self, i: int, x: Tensor, svec: Tensor) -> Tensor:
        pre = f"single_blocks.{i}"
        shift, scale, gate = T.split(self.linear(svec, f"{pre}.mod"), 3, axis=-1)
        h = self._modulate(x, shift, scale)
        att = self.attention(*(self.linear(h, f"{pre}.{p}") for p in ("q", "k", "v")))
        mlp = self.linear(T.gelu(self.linear(h, f"{pre}.mlp1")), f"{pre}.mlp2")
        return T.add(x, T.mul(T.add(self.linear(att, f"{pre}.o"), mlp), gate))

    def _image_tokens(self, images: np.ndarray) -> Tensor:
        cfg = self.cfg
        tokens = self.linear(Tensor(patchify(images, cfg.patch_size)), "img_in")
        g, d = cfg.grid, cfg.d_model
        row = T.reshape(self.params["pos_row"], (g, 1, d))
        col = T.reshape(self.params["pos_col"], (1, g, d))
        # only leading axes broadcast, so rows and batch are expanded explicitly
        rows = T.concat([row] * g, axis=1)
        pos = T.reshape(T.add(rows, col), (g * g, 1, d))
        return T.add(tokens, T.concat([pos] * images.shape[0], axis=1))

    def forward(self, z_t, context, prompt_ids, t) -> Tensor:
        """Predict velocity for images shaped (B, S, S, C) (or unbatched (S, S, C))."""
        cfg = self.cfg
        z_t = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
        context = np.asarray(context, dtype=np.float64)
        single = z_t.ndim == 3
        if single:
            z_t, context = z_t[None], context[None]
            prompt_ids = [prompt_ids]
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if z_t.shape[1:] != expected or context.shape != z_t.shape:
            raise T.ShapeError(f"expected images of shape (B, {expected}), got {z_t.shape} and {context.shape}")
        b = z_t.shape[0]
        ids = np.asarray(prompt_ids, dtype=np.int64).reshape(b, -1)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))

        noisy = self._image_tokens(z_t)
        ctx = T.add(self._image_tokens(context), self.params["ctx_marker"])
        img = T.concat([noisy, ctx], axis=0)
        txt = self.linear(self.text.embed(ids), "txt_in")
        vec = self.linear(T.silu(self.linear(Tensor(timestep_features(t, cfg.time_dim)), "time_in.fc1")), "time_in.fc2")
        svec = T.silu(vec)

        for i in range(cfg.n_double_blocks):
            img, txt = self._double_block(i, img, txt, svec)
        n_txt = txt.shape[0]
        x = T.concat([txt, img], axis=0)
        for i in range(cfg.n_single_blocks):
            x = self._single_block(i, x, svec)
        x = T.take(x, n_txt, n_txt + cfg.n_patches)
        shift, scale = T.split(self.linear(svec, "final.mod"), 2, axis=-1)
        x = self.linear(self._modulate(x, shift, scale), "final.out")
        out = _unpatchify_tensor(x, cfg)
        return T.reshape(out, expected) if single else out

    __call__ = forward

