"""Word-level prompt vocabulary and a small trainable prompt embedder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

NULL = "<null>"
TASKS = ("noise", "rain", "haze")
PROMPT_TEMPLATE = "remove the {} from the image"
TEXT_LEN = 8

VOCAB_WORDS = (NULL, "remove", "the", "from", "image", "noise", "rain", "haze")


class UnknownTokenError(ValueError):
    pass


def task_prompt(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {{{', '.join(TASKS)}}}")
    return PROMPT_TEMPLATE.format(task)


class PromptVocab:
    def __init__(self, words=VOCAB_WORDS, max_len: int = TEXT_LEN):
        if words[0] != NULL:
            raise ValueError("the null token must have id 0")
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.max_len = max_len

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, prompt: str) -> list[int]:
        words = prompt.split()
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise UnknownTokenError(f"unknown token(s) in prompt: {', '.join(unknown)}")
        if len(words) > self.max_len:
            raise UnknownTokenError(f"prompt has {len(words)} tokens; at most {self.max_len} fit")
        ids = [self.index[w] for w in words]
        return ids + [0] * (self.max_len - len(ids))

    def to_json(self) -> dict:
        return {"words": list(self.words), "max_len": self.max_len}

    @classmethod
    def from_json(cls, obj: dict) -> PromptVocab:
        return cls(tuple(obj["words"]), int(obj["max_len"]))


class TextEmbedder:
    """Embedding table plus per-position vectors; pad (null) positions get no positional term."""

    def __init__(self, vocab: PromptVocab, d_model: int, rng: np.random.Generator, trainable: bool = False):
        self.vocab = vocab
        self.d_model = d_model
        self.table = Tensor(rng.normal(0.0, 1.0, (len(vocab), d_model)), name="text.table")
        self.position = Tensor(rng.normal(0.0, 0.1, (vocab.max_len, d_model)), name="text.position")
        self.set_trainable(trainable)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        for p in self.parameters().values():
            p.requires_grad = self.trainable
            p.grad = None

    def parameters(self) -> dict[str, Tensor]:
        return {"text.table": self.table, "text.position": self.position}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters().values():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def embed(self, ids) -> Tensor:
        """``ids`` is one sequence (L,) or a batch (B, L); returns (L, d) or (L, B, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise IndexError(f"token id out of range [0, {len(self.vocab)})")
        single = ids.ndim == 1
        batch = ids[None, :] if single else ids
        seq = batch.T  # (L, B)
        full = seq.shape + (self.d_model,)
        mask = np.broadcast_to((seq != 0).astype(np.float64)[:, :, None], full)
        tok = T.reshape(T.lookup(self.table, seq.reshape(-1)), full)
        rows = np.repeat(np.arange(seq.shape[0]), seq.shape[1])
        pos = T.mul(T.reshape(T.lookup(self.position, rows), full), Tensor(mask))
        out = T.add(tok, pos)
        return T.reshape(out, (seq.shape[0], self.d_model)) if single else out
