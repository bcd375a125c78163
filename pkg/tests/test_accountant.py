import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comic_kit.accountant import ModelSpec, SpecError, count, format_table, reference_suite, suite_json
from comic_kit.attention import AttentionConfig
from comic_kit.autodiff import Rng
from comic_kit.decoder import DecoderConfig, init_params

M = 1e6


def _close(value, published, tol=0.02):
    return abs(value - published) / published <= tol


def test_word_baseline():
    rep = count(ModelSpec(9962))
    assert _close(rep.total, 12.2 * M)
    assert _close(rep.embeddings, 7.7 * M)
    assert rep.total == rep.embeddings + rep.recurrent + rep.attention + rep.init + rep.norms


def test_table_two():
    published = {("none", False): 9.8, ("untied", False): 9.6, ("tied", False): 9.2,
             ("none", True): 4.2, ("untied", True): 3.9, ("tied", True): 3.5}
    for (proj, radix), size in published.items():
        spec = ModelSpec(128 if radix else 9962, m=64, projection=proj, q=512 if proj == "untied" else None, radix=radix)
        assert _close(count(spec).total, size * M), (proj, radix)


def test_compact_models():
    assert _close(count(ModelSpec(256, projection="tied", g=8, radix=True)).total, 4.0 * M)
    assert _close(count(ModelSpec(25598, specials_included=True)).total, 24.0 * M)
    assert _close(count(ModelSpec(9962, m=128, n=160, k=160)).total, 3.9 * M)


def test_projection_ordering_at_default_sizes():
    sizes = [count(ModelSpec(9962, projection=p, q=512 if p == "untied" else None)).total for p in ("tied", "untied", "none")]
    assert sizes == sorted(sizes) and len(set(sizes)) == 3


@pytest.mark.parametrize("proj", ["none", "untied", "tied"])
def test_head_count_does_not_change_size(proj):
    q = 512 if proj == "untied" else None
    totals = {count(ModelSpec(128, projection=proj, q=q, g=g, radix=True)).total for g in (1, 2, 4, 8, 16)}
    assert len(totals) == 1


def test_suite_passes_and_serialises():
    rows = reference_suite()
    assert all(r.ok for r in rows if r.gated)
    names = {r.name for r in rows}
    for want in ("reference COMIC-256", "InstaPIC Baseline-SI", "vocab radix base-64"):
        assert want in names
    assert len(json.loads(suite_json(rows))) == len(rows)
    assert "MISS" not in format_table([r for r in rows if r.gated])


def test_character_row_uses_given_vocabulary():
    small = next(r for r in reference_suite(30) if r.name == "vocab character")
    large = next(r for r in reference_suite(70) if r.name == "vocab character")
    assert small.computed < large.computed
    assert small.ok and large.ok


def test_zero_vocabulary_has_only_specials():
    rep = count(ModelSpec(0, radix=True))
    assert rep.embeddings == 256 * 2 + 2 * 512 + 2


@pytest.mark.parametrize(
    "kw", [dict(projection="bogus"), dict(projection="untied"), dict(g=3), dict(m=0), dict(vocab=-1), dict(projection="none", g=5, k=10)]
)
def test_inconsistent_specs(kw):
    kw = {"vocab": 100, **kw}
    with pytest.raises(SpecError):
        ModelSpec(**kw)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["none", "untied", "tied"]),
    st.sampled_from([1, 2, 4]),
    st.integers(1, 3).map(lambda x: 4 * x),
    st.integers(1, 12),
    st.integers(3, 40),
    st.booleans(),
)
def test_matches_allocated_parameters(proj, g, k, m, vocab, tie):
    n, r = 8, 12
    att = AttentionConfig(g, k, proj, 8 if proj == "untied" else None, 1.0, r, n)
    cfg = DecoderConfig(n, m, 12, vocab, att, tie_embeddings=tie)
    allocated = init_params(cfg, Rng(0)).num_elements()
    assert count(ModelSpec.from_decoder_config(cfg)).total == allocated
