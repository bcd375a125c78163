import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comic_kit import autodiff as ad
from comic_kit.accountant import ModelSpec, count
from comic_kit.attention import (
    AttentionConfig,
    AttentionConfigError,
    attend,
    attention_param_shapes,
    init_attention_params,
    precompute_projection,
)
from comic_kit.autodiff import ParameterSet, Tensor


def _setup(cfg, seed=0):
    params = ParameterSet(init_attention_params(cfg, np.random.default_rng(seed)))
    for p in params:
        if p.name.endswith(("ln_gain", "ln_bias")):
            p.data = np.random.default_rng(seed + 1).normal(1.0 if "gain" in p.name else 0.0, 0.3, p.shape)
    return params


def _single_head_reference(f, h, params):
    """Plain one-head additive attention, written out with numpy."""
    W0, W1, W2 = params["attention/W_M0"].data, params["attention/W_M1"].data, params["attention/W_M2"].data
    gain, bias = params["attention/ln_gain"].data, params["attention/ln_bias"].data
    pre = f @ W0.T + (h @ W1.T)[:, None, :]
    mu = pre.mean(-1, keepdims=True)
    var = ((pre - mu) ** 2).mean(-1, keepdims=True)
    normed = (pre - mu) / np.sqrt(var + 1e-6) * gain + bias
    e = np.tanh(normed) @ W2[0]
    a = np.exp(e - e.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    return a


@pytest.mark.parametrize("projection", ["none", "untied", "tied"])
@pytest.mark.parametrize("heads", [1, 2, 4, 8])
def test_weights_sum_to_one(f64, projection, heads):
    cfg = AttentionConfig(heads, 16, projection, 16 if projection == "untied" else None, 1.0, 24, 10)
    params = _setup(cfg)
    rng = np.random.default_rng(heads)
    f = rng.standard_normal((5, 7, 24)) * 3
    h = rng.standard_normal((5, 10)) * 3
    out = attend(precompute_projection(f, params, cfg), Tensor(h), params, cfg)
    assert out.weights.shape == (5, heads, 7)
    assert out.context.shape == (5, cfg.context_size)
    np.testing.assert_allclose(out.weights.data.sum(-1), 1.0, atol=1e-6)


def test_single_head_matches_reference(f64):
    cfg = AttentionConfig(1, 16, "none", None, 1.0, 24, 10)
    params = _setup(cfg)
    rng = np.random.default_rng(5)
    f, h = rng.standard_normal((3, 6, 24)), rng.standard_normal((3, 10))
    out = attend(precompute_projection(f, params, cfg), Tensor(h), params, cfg)
    ref = _single_head_reference(f, h, params)
    assert np.max(np.abs(out.weights.data[:, 0] - ref)) <= 1e-12
    np.testing.assert_allclose(out.context.data, np.einsum("bj,bjr->br", ref, f), atol=1e-12)


def test_heads_see_only_their_channel_group(f64):
    cfg = AttentionConfig(2, 8, "none", None, 1.0, 6, 4)
    params = _setup(cfg)
    rng = np.random.default_rng(0)
    f, h = rng.standard_normal((1, 5, 6)), Tensor(rng.standard_normal((1, 4)))
    out = attend(precompute_projection(f, params, cfg), h, params, cfg)
    alpha = out.weights.data[0]
    np.testing.assert_allclose(out.context.data[0, :3], alpha[0] @ f[0, :, :3], atol=1e-12)
    np.testing.assert_allclose(out.context.data[0, 3:], alpha[1] @ f[0, :, 3:], atol=1e-12)


def test_tied_context_is_scoring_projection(f64):
    cfg = AttentionConfig(4, 8, "tied", None, 1.0, 6, 4)
    params = _setup(cfg)
    f = np.random.default_rng(1).standard_normal((2, 5, 6))
    proj = precompute_projection(f, params, cfg)
    assert proj.values is proj.scores
    np.testing.assert_allclose(proj.scores.data, f @ params["attention/W_M0"].data.T)


def test_temperature_sharpens(f64):
    base = AttentionConfig(1, 8, "none", None, 1.0, 6, 4)
    cold = AttentionConfig(1, 8, "none", None, 0.1, 6, 4)
    params = _setup(base)
    rng = np.random.default_rng(2)
    f, h = rng.standard_normal((1, 5, 6)), Tensor(rng.standard_normal((1, 4)))
    warm_w = attend(precompute_projection(f, params, base), h, params, base).weights.data
    cold_w = attend(precompute_projection(f, params, cold), h, params, cold).weights.data
    assert cold_w.max() > warm_w.max()
    assert cold_w.argmax() == warm_w.argmax()


def test_uniform_when_scores_are_flat(f64):
    cfg = AttentionConfig(2, 8, "tied", None, 1.0, 6, 4)
    params = _setup(cfg)
    params["attention/W_M2"].data[:] = 0.0
    f = np.random.default_rng(3).standard_normal((2, 5, 6))
    out = attend(precompute_projection(f, params, cfg), Tensor(np.ones((2, 4))), params, cfg)
    np.testing.assert_allclose(out.weights.data, 0.2)


@pytest.mark.parametrize("projection", ["none", "untied", "tied"])
def test_parameter_count_independent_of_heads(projection):
    sizes = set()
    for g in (1, 2, 4, 8):
        cfg = AttentionConfig(g, 512, projection, 512 if projection == "untied" else None, 1.0, 832, 512)
        sizes.add(sum(int(np.prod(s)) for s in attention_param_shapes(cfg).values()))
    assert len(sizes) == 1


def test_parameter_count_example():
    cfg = AttentionConfig(8, 512, "tied", None, 1.0, 832, 512)
    shapes = attention_param_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    norms = sum(int(np.prod(s)) for n, s in shapes.items() if "ln_" in n)
    assert (total, norms) == (689_664, 1_024)
    untied = AttentionConfig(8, 512, "untied", 512, 1.0, 832, 512)
    assert sum(int(np.prod(s)) for s in attention_param_shapes(untied).values()) == total + 425_984
    assert count(ModelSpec(128, g=8, projection="tied", radix=True)).attention == total


def test_tied_projection_by_hand(f64):
    cfg = AttentionConfig(1, 4, "tied", None, 1.0, 3, 2)
    params = _setup(cfg)
    params["attention/W_M0"].data[:] = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]]
    f = np.array([[[1.0, 2.0, 3.0], [0.0, -1.0, 2.0]]])
    proj = precompute_projection(f, params, cfg)
    np.testing.assert_array_equal(proj.scores.data[0], [[1, 2, 3, 6], [0, -1, 2, 1]])


def test_none_passes_features_through(f64):
    cfg = AttentionConfig(2, 4, "none", None, 1.0, 6, 2)
    f = np.random.default_rng(0).standard_normal((1, 3, 6))
    np.testing.assert_array_equal(precompute_projection(f, _setup(cfg), cfg).values.data, f)


def test_untied_zero_projection_gives_zero_context(f64):
    cfg = AttentionConfig(2, 4, "untied", 4, 1.0, 6, 2)
    params = _setup(cfg)
    params["attention/W_f"].data[:] = 0.0
    f = np.random.default_rng(0).standard_normal((1, 3, 6))
    out = attend(precompute_projection(f, params, cfg), Tensor(np.ones((1, 2))), params, cfg)
    np.testing.assert_array_equal(out.context.data, 0.0)


def test_high_temperature_flattens(f64):
    cfg = AttentionConfig(2, 8, "tied", None, 1e6, 6, 4)
    params = _setup(cfg)
    f = np.random.default_rng(0).standard_normal((1, 5, 6)) * 5
    out = attend(precompute_projection(f, params, cfg), Tensor(np.ones((1, 4))), params, cfg)
    assert np.max(np.abs(out.weights.data - 0.2)) <= 1e-6


@pytest.mark.parametrize("projection", ["none", "untied", "tied"])
def test_location_permutation(f64, projection):
    cfg = AttentionConfig(2, 8, projection, 8 if projection == "untied" else None, 1.0, 6, 4)
    params = _setup(cfg)
    rng = np.random.default_rng(1)
    f, h = rng.standard_normal((1, 5, 6)), Tensor(rng.standard_normal((1, 4)))
    perm = rng.permutation(5)
    a = attend(precompute_projection(f, params, cfg), h, params, cfg)
    b = attend(precompute_projection(f[:, perm], params, cfg), h, params, cfg)
    np.testing.assert_allclose(b.weights.data, a.weights.data[:, :, perm], atol=1e-12)
    np.testing.assert_allclose(b.context.data, a.context.data, atol=1e-12)


def test_block_diagonal_heads_equal_independent_modules(f64):
    g, k, r, n = 2, 8, 6, 4
    cfg = AttentionConfig(g, k, "none", None, 1.0, r, n)
    params = _setup(cfg)
    W0 = params["attention/W_M0"].data
    d, c = k // g, r // g
    for h in range(g):  # head h reads only its own channel group
        W0[h * d : (h + 1) * d, :h * c] = 0.0
        W0[h * d : (h + 1) * d, (h + 1) * c :] = 0.0
    rng = np.random.default_rng(2)
    f, hp = rng.standard_normal((2, 5, r)), rng.standard_normal((2, n))
    multi = attend(precompute_projection(f, params, cfg), Tensor(hp), params, cfg)
    for h in range(g):
        rows, cols = slice(h * d, (h + 1) * d), slice(h * c, (h + 1) * c)
        one = AttentionConfig(1, d, "none", None, 1.0, c, n)
        sub = ParameterSet(init_attention_params(one, np.random.default_rng(0)))
        sub["attention/W_M0"].data = W0[rows, cols].copy()
        sub["attention/W_M1"].data = params["attention/W_M1"].data[rows].copy()
        sub["attention/W_M2"].data = params["attention/W_M2"].data[:, rows].copy()
        sub["attention/ln_gain"].data = params["attention/ln_gain"].data[rows].copy()
        sub["attention/ln_bias"].data = params["attention/ln_bias"].data[rows].copy()
        single = attend(precompute_projection(f[..., cols], sub, one), Tensor(hp), sub, one)
        np.testing.assert_allclose(multi.weights.data[:, h], single.weights.data[:, 0], atol=1e-12)
        np.testing.assert_allclose(multi.context.data[:, cols], single.context.data, atol=1e-12)


def test_two_heads_two_locations_scalar_oracle(f64):
    """g=2, |F|=2 with hand-set weights against a scalar, loop-by-loop evaluation."""
    import math

    cfg = AttentionConfig(2, 4, "tied", None, 1.0, 2, 2)
    params = _setup(cfg)
    W0 = [[0.5, -1.0], [1.0, 0.25], [-0.5, 0.5], [0.0, 1.0]]
    W1 = [[0.2, 0.0], [0.0, -0.3], [0.1, 0.1], [-0.2, 0.4]]
    W2 = [1.0, -2.0, 0.5, 1.5]
    gain, bias = [1.0, 0.5, 2.0, 1.0], [0.0, 0.1, -0.1, 0.0]
    params["attention/W_M0"].data = np.array(W0)
    params["attention/W_M1"].data = np.array(W1)
    params["attention/W_M2"].data = np.array([W2])
    params["attention/ln_gain"].data = np.array(gain)
    params["attention/ln_bias"].data = np.array(bias)
    f = [[1.0, 2.0], [-1.0, 0.5]]
    h = [0.3, -0.7]
    out = attend(precompute_projection(np.array([f]), params, cfg), Tensor(np.array([h])), params, cfg)

    for head in range(2):
        rows = range(2 * head, 2 * head + 2)
        energies, values = [], []
        for fj in f:
            s = [sum(W0[i][c] * fj[c] for c in range(2)) for i in rows]
            pre = [s[a] + sum(W1[i][c] * h[c] for c in range(2)) for a, i in enumerate(rows)]
            mu = (pre[0] + pre[1]) / 2
            var = ((pre[0] - mu) ** 2 + (pre[1] - mu) ** 2) / 2
            normed = [(pre[a] - mu) / math.sqrt(var + 1e-6) * gain[i] + bias[i] for a, i in enumerate(rows)]
            energies.append(sum(W2[i] * math.tanh(normed[a]) for a, i in enumerate(rows)))
            values.append(s)
        z = [math.exp(e) for e in energies]
        alpha = [v / sum(z) for v in z]
        ctx = [alpha[0] * values[0][a] + alpha[1] * values[1][a] for a in range(2)]
        np.testing.assert_allclose(out.weights.data[0, head], alpha, atol=1e-12)
        np.testing.assert_allclose(out.context.data[0, 2 * head : 2 * head + 2], ctx, atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(heads=3, mlp_size=8),
        dict(heads=2, mlp_size=8, projection="untied", projected_size=5),
        dict(heads=2, mlp_size=8, projection="untied"),
        dict(heads=4, mlp_size=8, projection="none", feature_channels=6),
        dict(projection="bogus"),
        dict(temperature=0.0),
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(AttentionConfigError):
        AttentionConfig(**kwargs)


def test_dimension_errors(f64):
    cfg = AttentionConfig(2, 8, "tied", None, 1.0, 6, 4)
    params = _setup(cfg)
    with pytest.raises(ad.DimensionError):
        precompute_projection(np.ones((1, 5, 7)), params, cfg)
    proj = precompute_projection(np.ones((1, 5, 6)), params, cfg)
    with pytest.raises(ad.DimensionError):
        attend(proj, Tensor(np.ones((1, 3))), params, cfg)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["none", "untied", "tied"]), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_weights_normalised_property(projection, heads, seed):
    cfg = AttentionConfig(heads, 8, projection, 8 if projection == "untied" else None, 1.0, 8, 6)
    params = _setup(cfg, seed % 1000)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, 9, 8)) * rng.uniform(0.1, 10)
    h = rng.standard_normal((2, 6)) * rng.uniform(0.1, 10)
    with ad.precision(np.float64):
        out = attend(precompute_projection(f, params, cfg), Tensor(h), params, cfg)
    w = out.weights.data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("projection", ["none", "untied", "tied"])
def test_attention_gradients(f64, projection):
    cfg = AttentionConfig(2, 8, projection, 8 if projection == "untied" else None, 1.0, 6, 4)
    params = _setup(cfg)
    rng = np.random.default_rng(7)
    f, h = rng.standard_normal((2, 5, 6)), Tensor(rng.standard_normal((2, 4)))
    w = rng.standard_normal((2, cfg.context_size))

    def loss():
        out = attend(precompute_projection(f, params, cfg), h, params, cfg)
        return (out.context * w).sum()

    assert ad.grad_check(loss, params) < 1e-4
