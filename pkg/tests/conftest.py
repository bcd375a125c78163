import numpy as np
import pytest

from comic_kit import autodiff as ad
from comic_kit.attention import AttentionConfig
from comic_kit.decoder import DecoderConfig, init_params, make_batch


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def tiny_config(projection="tied", heads=2, dropout=0.0, tie=False, vocab=10, state=8, word=6, mlp=8, channels=12):
    att = AttentionConfig(
        heads=heads,
        mlp_size=mlp,
        projection=projection,
        projected_size=8 if projection == "untied" else None,
        feature_channels=channels,
        state_size=state,
    )
    return DecoderConfig(
        state_size=state,
        word_size=word,
        image_embed_size=channels,
        vocab_size=vocab,
        attention=att,
        dropout_rate=dropout,
        tie_embeddings=tie,
    )


TINY_SEQUENCES = [[8, 1, 2, 3, 9], [8, 4, 9], [8, 5, 6, 9]]


def tiny_setup(projection="tied", heads=2, seed=0, **kw):
    """Config, parameters and a three-caption batch at the gradient-check dimensions."""
    cfg = tiny_config(projection, heads, **kw)
    params = init_params(cfg, ad.Rng(seed))
    feats = np.random.default_rng(seed + 10).standard_normal((3, 4, cfg.attention.feature_channels))
    return cfg, params, make_batch(feats, TINY_SEQUENCES, cfg)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
