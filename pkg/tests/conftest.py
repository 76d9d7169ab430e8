import contextlib

import numpy as np
import pytest

from vltower import tensor as T
from vltower.data import gen_synthetic
from vltower.models import EncoderDims, ModelConfig

# acceptance lines collected by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@contextlib.contextmanager
def float64():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        yield
    finally:
        T.set_default_dtype(prev)


def tiny_config(model_type="two_tower", d=16, heads=2, layers=1, cross_layers=1, image=16, **kw) -> ModelConfig:
    dims = EncoderDims(d, heads, layers, 2 * d)
    return ModelConfig(
        model_type=model_type,
        vocab_size=kw.pop("vocab_size", 40),
        max_text_len=kw.pop("max_text_len", 12),
        image_height=image,
        image_width=image,
        patch_size=8,
        text=dims,
        vision=EncoderDims(d, heads, layers, 2 * d),
        cross=EncoderDims(d, heads, cross_layers, 2 * d),
        **kw,
    )


def small_towers_config(**kw) -> ModelConfig:
    """Desk-sized two-tower with the small text/vision tower proportions."""
    return ModelConfig(
        model_type="two_tower",
        vocab_size=40,
        max_text_len=16,
        text=EncoderDims(256, 4, 12, 1024, embed=128),
        vision=EncoderDims(192, 3, 12, 768),
        cross=EncoderDims(256, 4, 6, 1024),
        **kw,
    )


def base_config(**kw) -> ModelConfig:
    """Base-sized towers at full vocabulary and image geometry."""
    return ModelConfig(
        model_type="two_tower",
        vocab_size=30522,
        max_text_len=512,
        image_height=224,
        image_width=224,
        patch_size=16,
        text=EncoderDims(768, 12, 12, 3072),
        vision=EncoderDims(768, 12, 12, 3072),
        cross=EncoderDims(256, 4, 10, 1024),
        **kw,
    )


def walk_count(module, trainable_only=False) -> int:
    """Parameter-walk oracle: visits the attribute tree, counts each array once."""
    seen, total = set(), 0
    stack = [module]
    while stack:
        m = stack.pop()
        for v in vars(m).values():
            if isinstance(v, T.Tensor) and id(v) not in seen and any(v is p for p in m._params.values()):
                seen.add(id(v))
                if v.requires_grad or not trainable_only:
                    total += v.data.size
            elif hasattr(v, "_params") and id(v) not in seen:
                seen.add(id(v))
                stack.append(v)
            elif isinstance(v, list):
                stack.extend(x for x in v if hasattr(x, "_params") and id(x) not in seen)
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpora(tmp_path_factory):
    """Small generated corpora for every task, shared across tests."""
    root = tmp_path_factory.mktemp("corpora")
    gen_synthetic(root / "pretrain", 0, {"train": 200, "dev": 64}, "pretrain")
    for task in ("snli_ve", "nlvr2", "ref_res", "vqa"):
        gen_synthetic(root / task, 0, {"train": 96, "dev": 60}, task)
    return root
