import numpy as np
import pytest

from restoreflow import tensor as T
from restoreflow.model import FlowTransformer, ModelConfig
from restoreflow.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=8, patch_size=4, d_model=16, heads=2, n_double_blocks=1, n_single_blocks=1, mlp_ratio=2,
                time_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def randomize(model: FlowTransformer, seed: int = 0, std: float = 0.2) -> FlowTransformer:
    """Replace zero-initialized layers with noise so every path carries signal."""
    r = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data + std * r.standard_normal(p.shape)
    return model


def op_cases(rng):
    """(name, fn, inputs) covering every differentiable op."""
    a23, b23 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    table = rng.standard_normal((5, 3))
    w = rng.standard_normal((4, 3))
    wx = rng.standard_normal((4, 4))
    return [
        ("add", lambda a, b: T.sum(T.mul(T.add(a, b), Tensor(wx[:2, :3]))), [a23, b23]),
        ("add_broadcast", lambda a, b: T.sum(T.tanh(T.add(a, b))), [a23, b23[0]]),
        ("sub", lambda a, b: T.sum(T.mul(T.sub(a, b), T.sub(a, b))), [a23, b23]),
        ("mul", lambda a, b: T.sum(T.mul(a, b)), [a23, b23]),
        ("mul_broadcast", lambda a, b: T.sum(T.tanh(T.mul(a, b))), [a23, b23[1]]),
        ("scale", lambda a: T.sum(T.mul(T.scale(a, -1.7), a)), [a23]),
        ("gelu", lambda a: T.sum(T.mul(T.gelu(a), Tensor(b23))), [a23 * 2]),
        ("silu", lambda a: T.sum(T.mul(T.silu(a), Tensor(b23))), [a23 * 2]),
        ("tanh", lambda a: T.sum(T.mul(T.tanh(a), Tensor(b23))), [a23]),
        ("mean", lambda a: T.mean(T.mul(a, a)), [a23]),
        ("reshape", lambda a: T.sum(T.mul(T.reshape(a, (3, 2)), Tensor(b23.reshape(3, 2)))), [a23]),
        ("transpose", lambda a: T.sum(T.mul(T.transpose(a, (1, 0)), Tensor(b23.T))), [a23]),
        ("concat", lambda a, b: T.sum(T.tanh(T.concat([a, b], axis=1))), [a23, b23]),
        ("take", lambda a: T.sum(T.mul(T.take(a, 1, 3, axis=1), T.take(a, 0, 2, axis=1))), [a23]),
        ("split", lambda a: T.sum(T.mul(*T.split(T.reshape(a, (3, 2)), 2, axis=1))), [a23]),
        ("lookup", lambda t: T.sum(T.tanh(T.lookup(t, [0, 3, 3, 1]))), [table]),
        ("matmul", lambda a, b: T.sum(T.tanh(T.matmul(a, b))), [a23, rng.standard_normal((3, 4))]),
        ("matmul_batched", lambda a, b: T.sum(T.tanh(T.matmul(a, b))),
         [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))]),
        ("linear", lambda x, w_, b: T.sum(T.tanh(T.linear(x, w_, b))), [a23, w, rng.standard_normal(4)]),
        ("softmax", lambda a: T.sum(T.mul(T.softmax(a, axis=-1), Tensor(b23))), [a23]),
        ("softmax_axis0", lambda a: T.sum(T.mul(T.softmax(a, axis=0), Tensor(b23))), [a23]),
        ("layernorm", lambda a, g, b: T.sum(T.mul(T.layernorm(a, g, b), Tensor(b23))),
         [a23, rng.standard_normal(3), rng.standard_normal(3)]),
        ("mse", lambda a, b: T.mse(a, b), [a23, b23]),
    ]


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Print one PASS/FAIL line (inline and again in the terminal summary)."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def emit(name: str, ok: bool, detail: str = "", table: str | None = None) -> bool:
        line = f"ACCEPTANCE {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        with capsys.disabled():
            print("\n" + (table + "\n" if table else "") + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
