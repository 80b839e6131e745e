"""Layer math: finite-difference gradient checks plus structural behavior."""

import math

import numpy as np
import pytest

from exoego.models.core import (
    CausalSelfAttention,
    LayerNorm,
    Linear,
    Mlp,
    TransformerBlock,
    gelu_backward,
    gelu_forward,
    log_softmax,
    softmax,
    tanh_backward,
    tanh_forward,
)
from exoego.models.encoder import VisualEncoder, encode_batch
from exoego.models.lm import TinyLM, Vocab, lm_logits
from exoego.models.lora import (
    DEFAULT_LORA_TARGETS,
    PAPER_LORA,
    TOY_LORA,
    LoRAConfig,
    lora_merge,
    lora_param_count,
    lora_wrap,
)
from exoego.models.mapping import FcMapping, MappingNet, map_apply, map_apply_with_cache
from exoego.models.pipeline import (
    ModelConfig,
    attach_adapters,
    build_model,
    concat_guidance,
)

EPS = 1e-5
TOL = 1e-4


def small_vocab():
    return Vocab.build(["pick up the cup", "open the drawer", "pour water slowly"])


def _check_param_grads(module, run, x, w, seed=0, max_checks=60):
    """Compare accumulated parameter grads against central differences."""
    rng = np.random.default_rng(seed)

    def loss():
        return float((run(x)[0] * w).sum())

    analytic = {k: v.copy() for k, v in module.named_grads().items()}
    params = module.named_parameters()
    entries = [
        (name, idx)
        for name in sorted(params)
        for idx in np.ndindex(params[name].shape)
    ]
    if len(entries) > max_checks:
        picked = rng.choice(len(entries), size=max_checks, replace=False)
        entries = [entries[i] for i in picked]
    for name, idx in entries:
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + EPS
        up = loss()
        arr[idx] = orig - EPS
        down = loss()
        arr[idx] = orig
        fd = (up - down) / (2 * EPS)
        an = analytic[name][idx]
        assert abs(fd - an) <= TOL * max(1.0, abs(fd), abs(an)), (name, idx, fd, an)


def _check_input_grad(run, x, dx, w):
    def loss(arr):
        return float((run(arr)[0] * w).sum())

    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += EPS
        minus[idx] -= EPS
        fd = (loss(plus) - loss(minus)) / (2 * EPS)
        assert abs(fd - dx[idx]) <= TOL * max(1.0, abs(fd)), (idx, fd, dx[idx])


def _full_check(module, x, seed=0, max_checks=60, run=None):
    run = run or module.forward
    rng = np.random.default_rng(seed + 1)
    y, cache = run(x)
    w = rng.normal(size=y.shape)
    module.zero_grads()
    dx = module.backward(cache, w)
    _check_param_grads(module, run, x, w, seed=seed, max_checks=max_checks)
    _check_input_grad(run, x, dx, w)


# ---------------------------------------------------------------------------
# Core layers
# ---------------------------------------------------------------------------


def test_linear_grads():
    rng = np.random.default_rng(0)
    _full_check(Linear(3, 4, rng), rng.normal(size=(2, 3)))


def test_linear_batched_leading_dims():
    rng = np.random.default_rng(1)
    _full_check(Linear(3, 4, rng), rng.normal(size=(2, 5, 3)))


def test_linear_zero_init_maps_to_zero():
    rng = np.random.default_rng(2)
    lin = Linear(4, 6, rng, zero_init=True)
    y, _ = lin.forward(rng.normal(size=(3, 4)))
    assert np.all(y == 0.0)


def test_linear_grads_accumulate_across_calls():
    rng = np.random.default_rng(3)
    lin = Linear(3, 3, rng)
    x = rng.normal(size=(2, 3))
    _, cache = lin.forward(x)
    dy = rng.normal(size=(2, 3))
    lin.zero_grads()
    lin.backward(cache, dy)
    once = {k: v.copy() for k, v in lin.named_grads().items()}
    lin.backward(cache, dy)
    for k, v in lin.named_grads().items():
        np.testing.assert_allclose(v, 2.0 * once[k], atol=1e-14)


def test_layernorm_normalizes_and_grads():
    rng = np.random.default_rng(4)
    ln = LayerNorm(5)
    x = rng.normal(2.0, 3.0, size=(4, 5))
    y, _ = ln.forward(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)
    _full_check(ln, x)


def test_attention_grads_causal_and_not():
    rng = np.random.default_rng(5)
    for causal in (True, False):
        _full_check(
            CausalSelfAttention(8, 2, rng, causal=causal),
            rng.normal(size=(2, 4, 8)),
            max_checks=50,
        )


def test_causal_attention_ignores_the_future():
    rng = np.random.default_rng(6)
    attn = CausalSelfAttention(8, 2, rng, causal=True)
    x = rng.normal(size=(1, 5, 8))
    y, _ = attn.forward(x)
    bumped = x.copy()
    bumped[0, 4] += 1.0
    y2, _ = attn.forward(bumped)
    np.testing.assert_array_equal(y[0, :4], y2[0, :4])
    assert not np.allclose(y[0, 4], y2[0, 4])


def test_bidirectional_attention_sees_everything():
    rng = np.random.default_rng(7)
    attn = CausalSelfAttention(8, 2, rng, causal=False)
    x = rng.normal(size=(1, 5, 8))
    y, _ = attn.forward(x)
    bumped = x.copy()
    bumped[0, 4] += 1.0
    y2, _ = attn.forward(bumped)
    assert not np.allclose(y[0, 0], y2[0, 0])


def test_mlp_and_block_grads():
    rng = np.random.default_rng(8)
    _full_check(Mlp(6, 12, rng), rng.normal(size=(2, 3, 6)))
    _full_check(TransformerBlock(8, 2, rng, causal=True), rng.normal(size=(2, 4, 8)))


def test_activation_gradients():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 7))
    for fwd, bwd in ((tanh_forward, tanh_backward), (gelu_forward, gelu_backward)):
        y, cache = fwd(x)
        dy = rng.normal(size=y.shape)
        dx = bwd(cache, dy)
        for idx in np.ndindex(x.shape):
            plus, minus = x.copy(), x.copy()
            plus[idx] += EPS
            minus[idx] -= EPS
            fd = ((fwd(plus)[0] * dy).sum() - (fwd(minus)[0] * dy).sum()) / (2 * EPS)
            assert abs(fd - dx[idx]) <= TOL * max(1.0, abs(fd))


def test_softmax_numerics():
    x = np.array([[1000.0, 1000.0, 999.0], [-1000.0, 0.0, 3.0]])
    s = softmax(x)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    # log_softmax stays finite where log(softmax) would underflow to -inf
    ls = log_softmax(x)
    assert np.all(np.isfinite(ls))
    lse = 3.0 + math.log(1.0 + math.exp(-3.0) + math.exp(-1003.0))
    assert math.isclose(ls[1, 0], -1000.0 - lse, rel_tol=1e-12)
    mild = np.array([[0.3, -1.2, 2.0]])
    np.testing.assert_allclose(log_softmax(mild), np.log(softmax(mild)), atol=1e-12)
    # shift invariance
    np.testing.assert_allclose(softmax(x + 17.0), s, atol=1e-12)


# ---------------------------------------------------------------------------
# Mapping networks
# ---------------------------------------------------------------------------


def test_mapping_grads():
    rng = np.random.default_rng(10)
    net = MappingNet(6, rng, n_blocks=2)
    x = rng.normal(size=(2, 3, 6))
    _full_check(net, x, run=lambda a: map_apply_with_cache(net, a))


def test_fc_mapping_grads():
    rng = np.random.default_rng(11)
    net = FcMapping(6, rng)
    _full_check(net, rng.normal(size=(4, 6)), run=lambda a: map_apply_with_cache(net, a))


def test_mapping_zeroed_residuals_reduce_to_projections():
    rng = np.random.default_rng(12)
    net = MappingNet(8, rng, n_blocks=3)
    for name, arr in net.named_parameters().items():
        if name.startswith("res."):
            arr[...] = 0.0
    x = rng.normal(size=(5, 8))
    down, _ = net._mods["down"].forward(x)
    expected, _ = net._mods["up"].forward(down)
    np.testing.assert_array_equal(map_apply(net, x), expected)


def test_mapping_bottleneck_defaults_to_half_width():
    rng = np.random.default_rng(13)
    assert MappingNet(10, rng).hidden == 5
    assert FcMapping(10, rng).hidden == 5
    with pytest.raises(ValueError):
        MappingNet(1, rng)


def test_map_apply_validates():
    rng = np.random.default_rng(14)
    net = MappingNet(6, rng, n_blocks=1)
    with pytest.raises(ValueError):
        map_apply(net, np.zeros((2, 5)))
    with pytest.raises(ValueError):
        map_apply(net, np.full((2, 6), np.nan))


def test_mapping_preserves_shape():
    rng = np.random.default_rng(15)
    net = MappingNet(6, rng, n_blocks=1)
    for shape in ((6,), (2, 6), (2, 3, 6)):
        assert map_apply(net, rng.normal(size=shape)).shape == shape


# ---------------------------------------------------------------------------
# Visual encoders
# ---------------------------------------------------------------------------


def test_encoder_grads():
    rng = np.random.default_rng(16)
    enc = VisualEncoder("ego", 5, 8, rng, n_blocks=1, n_heads=2, n_frames=3)
    x = rng.normal(size=(2, 3, 5))
    _full_check(enc, x, run=lambda a: encode_batch(enc, a), max_checks=50)


def test_encoder_validates_input():
    rng = np.random.default_rng(17)
    enc = VisualEncoder("exo", 5, 8, rng, n_frames=3)
    with pytest.raises(ValueError):
        encode_batch(enc, np.zeros((2, 4, 5)))  # wrong frame count
    with pytest.raises(ValueError):
        encode_batch(enc, np.full((2, 3, 5), np.inf))
    with pytest.raises(ValueError):
        VisualEncoder("overhead", 5, 8, rng)


# ---------------------------------------------------------------------------
# Language model
# ---------------------------------------------------------------------------


def test_vocab_build_and_round_trip():
    v = small_vocab()
    assert v.tokens[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
    assert v.tokens[4:] == tuple(sorted(v.tokens[4:]))
    text = "open the drawer"
    ids = v.encode(text, add_eos=True)
    assert ids[-1] == 2
    assert v.decode(ids) == text
    assert v.encode("zzz unseen") == [3, 3]
    assert v.decode([1, 0] + v.encode("pour water") + [2, 5]) == "pour water"


def test_vocab_rejects_bad_token_tables():
    with pytest.raises(ValueError):
        Vocab(tokens=("a", "b", "c", "d"))
    with pytest.raises(ValueError):
        Vocab(tokens=("<pad>", "<bos>", "<eos>", "<unk>", "x", "x"))


def test_lm_grads_with_prefix():
    rng = np.random.default_rng(18)
    lm = TinyLM(12, 8, rng, n_blocks=1, n_heads=2, max_len=16)
    in_ids = np.array([[1, 5, 7]])
    prefix = rng.normal(size=(1, 2, 8))
    _full_check(lm, prefix, run=lambda p: lm.forward(p, in_ids), max_checks=60)


def test_lm_logits_shape_and_bounds():
    rng = np.random.default_rng(19)
    lm = TinyLM(10, 8, rng, n_blocks=1, max_len=12)
    assert lm_logits(lm, None, [4, 5, 6]).shape == (3, 10)
    assert lm_logits(lm, None, []).shape == (1, 10)
    with pytest.raises(ValueError):
        lm_logits(lm, None, [10])


def test_lm_logits_are_causal_in_the_tokens():
    rng = np.random.default_rng(20)
    lm = TinyLM(10, 8, rng, n_blocks=1, max_len=12)
    prefix = rng.normal(size=(2, 8))
    # row i scores tokens[i] from the history tokens[:i]; swapping the third
    # token can therefore only show up from row 3 onward
    a = lm_logits(lm, prefix, [4, 5, 6, 7])
    b = lm_logits(lm, prefix, [4, 5, 9, 7])
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3], b[3])


def test_lm_prefix_steers_the_logits():
    rng = np.random.default_rng(21)
    lm = TinyLM(10, 8, rng, n_blocks=1, max_len=12)
    # note: prefixes differing by a constant shift are equivalent (the first
    # normalization removes the shift), so steer with a random direction
    a = lm_logits(lm, rng.normal(size=(2, 8)), [4, 5])
    b = lm_logits(lm, rng.normal(size=(2, 8)), [4, 5])
    assert not np.allclose(a, b)


def test_lm_is_blind_to_constant_prefix_shifts():
    rng = np.random.default_rng(27)
    lm = TinyLM(10, 8, rng, n_blocks=1, max_len=12)
    prefix = rng.normal(size=(2, 8))
    a = lm_logits(lm, prefix, [4, 5])
    b = lm_logits(lm, prefix + 3.0, [4, 5])
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_lm_rejects_bad_prefix():
    rng = np.random.default_rng(22)
    lm = TinyLM(10, 8, rng, n_blocks=1, max_len=12)
    with pytest.raises(ValueError):
        lm.forward(np.zeros((1, 2, 5)), np.array([[1, 4]]))
    with pytest.raises(ValueError):
        lm.forward(np.full((1, 2, 8), np.nan), np.array([[1, 4]]))


# ---------------------------------------------------------------------------
# Guidance concatenation
# ---------------------------------------------------------------------------


def test_guidance_orders_mapped_then_ego():
    ego = np.full((2, 3, 4), 7.0)
    mapped = np.full((2, 3, 4), -1.0)
    out = concat_guidance(ego, mapped)
    assert out.shape == (2, 6, 4)
    assert np.all(out[:, :3] == -1.0)
    assert np.all(out[:, 3:] == 7.0)


def test_guidance_validates_shapes():
    with pytest.raises(ValueError):
        concat_guidance(np.zeros((2, 3, 4)), np.zeros((2, 3, 5)))
    with pytest.raises(ValueError):
        concat_guidance(np.zeros(4), np.zeros(4))


# ---------------------------------------------------------------------------
# Assembled pipeline
# ---------------------------------------------------------------------------


def tiny_cfg(**kw):
    base = dict(
        ego_in_dim=5,
        exo_in_dim=7,
        d=8,
        enc_blocks=1,
        enc_heads=2,
        lm_blocks=2,
        lm_heads=2,
        map_blocks=2,
        n_frames=3,
        max_text_len=6,
    )
    base.update(kw)
    return ModelConfig(**base)


def test_build_model_is_deterministic_per_seed():
    vocab = small_vocab()
    a = build_model(tiny_cfg(), vocab, seed=3)
    b = build_model(tiny_cfg(), vocab, seed=3)
    c = build_model(tiny_cfg(), vocab, seed=4)
    pa, pb, pc = a.named_parameters(), b.named_parameters(), c.named_parameters()
    assert pa.keys() == pb.keys() == pc.keys()
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])
    assert any(not np.array_equal(pa[k], pc[k]) for k in pa)


def test_model_components_are_namespaced():
    model = build_model(tiny_cfg(), small_vocab(), seed=0)
    names = model.named_parameters()
    for prefix in ("ego_enc.", "exo_enc.", "map_f.", "map_g.", "lm."):
        assert any(n.startswith(prefix) for n in names)
    assert model.param_count() == sum(a.size for a in names.values())
    assert model.lm.max_len == 2 * 3 + 1 + 6


def test_model_mapping_kind_switch():
    model = build_model(tiny_cfg(map_kind="fc"), small_vocab(), seed=0)
    assert isinstance(model.map_f, FcMapping)
    assert isinstance(model.map_g, FcMapping)
    with pytest.raises(ValueError):
        build_model(tiny_cfg(map_kind="conv"), small_vocab(), seed=0)


def test_model_config_json_round_trip():
    cfg = tiny_cfg(map_kind="fc", map_hidden=3)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------


def test_adapter_presets():
    assert (TOY_LORA.r, TOY_LORA.alpha, TOY_LORA.dropout) == (4, 8.0, 0.0)
    assert (PAPER_LORA.r, PAPER_LORA.alpha, PAPER_LORA.dropout) == (128, 256.0, 0.1)
    assert TOY_LORA.targets == DEFAULT_LORA_TARGETS


def test_attach_is_an_exact_identity():
    vocab = small_vocab()
    model = build_model(tiny_cfg(), vocab, seed=1)
    prefix = np.random.default_rng(0).normal(size=(6, 8))
    tokens = vocab.encode("pick up the cup")
    before = lm_logits(model.lm, prefix, tokens)
    wrapped = attach_adapters(model, TOY_LORA, seed=5)
    after = lm_logits(model.lm, prefix, tokens)
    assert np.max(np.abs(after - before)) == 0.0
    assert sorted(wrapped) == sorted(
        f"lm.blocks.{i}.attn.{w}" for i in range(2) for w in ("wq", "wk", "wv", "wo")
    )


def test_wrapping_adds_names_without_renaming_bases():
    model = build_model(tiny_cfg(), small_vocab(), seed=1)
    base_names = set(model.named_parameters())
    attach_adapters(model, TOY_LORA)
    names = set(model.named_parameters())
    assert base_names <= names
    added = names - base_names
    assert added == {
        f"lm.blocks.{i}.attn.{w}.lora_{ab}"
        for i in range(2)
        for w in ("wq", "wk", "wv", "wo")
        for ab in ("a", "b")
    }


def test_adapter_bypass_formula():
    rng = np.random.default_rng(23)
    model = build_model(tiny_cfg(), small_vocab(), seed=1)
    attach_adapters(model, LoRAConfig(r=3, alpha=6.0), seed=2)
    layer = model.lm._mods["blocks.0"]._mods["attn"]._mods["wq"]
    params = layer.named_parameters()
    params["lora_b"][...] = rng.normal(size=params["lora_b"].shape)
    x = rng.normal(size=(4, 8))
    y, _ = layer.forward(x)
    base_y, _ = layer.base.forward(x)
    bypass = (6.0 / 3.0) * (x @ params["lora_a"].T @ params["lora_b"].T)
    np.testing.assert_allclose(y, base_y + bypass, atol=1e-12)


def test_merge_matches_wrapped_outputs():
    rng = np.random.default_rng(24)
    vocab = small_vocab()
    model = build_model(tiny_cfg(), vocab, seed=1)
    attach_adapters(model, TOY_LORA, seed=2)
    for name, arr in model.named_parameters().items():
        if name.endswith(("lora_a", "lora_b")):
            arr[...] = rng.normal(size=arr.shape)
    merged = lora_merge(model)
    assert not any(n.endswith(("lora_a", "lora_b")) for n in merged.named_parameters())
    prefix = rng.normal(size=(6, 8))
    tokens = vocab.encode("open the drawer")
    got = lm_logits(merged.lm, prefix, tokens)
    want = lm_logits(model.lm, prefix, tokens)
    assert np.max(np.abs(got - want)) <= 1e-5
    # the original wrapped model is untouched by merging
    assert any(n.endswith("lora_a") for n in model.named_parameters())


def test_adapter_param_count_formula():
    rng = np.random.default_rng(25)
    for _ in range(5):
        r = int(rng.integers(1, 9))
        model = build_model(tiny_cfg(), small_vocab(), seed=int(rng.integers(100)))
        attach_adapters(model, LoRAConfig(r=r, alpha=2.0 * r))
        # eight attention projections, each d -> d
        assert lora_param_count(model) == 8 * r * (8 + 8)


def test_adapter_grads():
    rng = np.random.default_rng(26)
    base = Linear(5, 4, rng)
    from exoego.models.lora import LoRALinear

    layer = LoRALinear(base, r=2, alpha=4.0, dropout=0.0, rng=rng)
    layer.p["lora_b"][...] = rng.normal(size=layer.p["lora_b"].shape)
    _full_check(layer, rng.normal(size=(3, 5)))


def test_wrap_error_branches():
    model = build_model(tiny_cfg(), small_vocab(), seed=0)
    with pytest.raises(ValueError):
        lora_wrap(model, LoRAConfig(targets=("lm.blocks.*.attn.nope",)))
    with pytest.raises(ValueError):
        lora_wrap(model, LoRAConfig(targets=("lm.ln_f",)))  # not an affine layer
    attach_adapters(model, TOY_LORA)
    with pytest.raises(ValueError):
        lora_wrap(model, TOY_LORA)  # double wrap
    with pytest.raises(ValueError):
        LoRAConfig(r=0).validate()
    with pytest.raises(ValueError):
        LoRAConfig(dropout=1.0).validate()
