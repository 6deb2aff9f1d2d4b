import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vlpseg.backbones import make_backbones
from vlpseg.episodes import generate_episode
from vlpseg.errors import ChannelMismatchError, EmptyMaskError, ModeMismatchError, ZeroNormError
from vlpseg.vlp_encoder import (
    AttentionBlock,
    ModelConfig,
    QueryAttention,
    VlpEncoder,
    attend,
    attention_mask,
    downsample_mask,
    enhance_features,
    forward,
    mask_avg_pool,
    minmax_normalize,
    project_vlm_features,
    pseudo_mask,
    similarity_matrix,
)


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestProjection:
    def test_identity_projection_is_passthrough(self, rng):
        raw = t64(rng.standard_normal((32, 8, 8)))
        out = project_vlm_features(raw, torch.eye(32, dtype=torch.float64), torch.zeros(32, dtype=torch.float64))
        assert torch.equal(out, raw)

    def test_zero_input_gives_bias(self, rng):
        w = t64(rng.standard_normal((64, 32)))
        b = t64(rng.standard_normal(64))
        out = project_vlm_features(torch.zeros(32, 8, 8, dtype=torch.float64), w, b)
        assert torch.equal(out, b[:, None, None].expand(64, 8, 8))

    def test_matches_per_pixel_loop(self, rng):
        raw = rng.standard_normal((32, 8, 8))
        w, b = rng.standard_normal((64, 32)), rng.standard_normal(64)
        out = project_vlm_features(t64(raw), t64(w), t64(b)).numpy()
        np.testing.assert_allclose(out, oracles.pointwise(raw, w, b), atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ChannelMismatchError):
            project_vlm_features(torch.zeros(16, 8, 8), torch.zeros(64, 32))


class TestMaskAvgPool:
    def test_full_mask_is_spatial_mean(self, rng):
        f = t64(rng.standard_normal((5, 4, 4)))
        np.testing.assert_allclose(mask_avg_pool(f, torch.ones(4, 4)), f.mean(dim=(1, 2)), atol=1e-12)

    def test_point_mask_selects_pixel(self, rng):
        f = t64(rng.standard_normal((5, 4, 4)))
        m = torch.zeros(4, 4)
        m[2, 1] = 1
        np.testing.assert_allclose(mask_avg_pool(f, m), f[:, 2, 1], atol=1e-12)

    def test_diagonal_mask_matches_loop(self, rng):
        f = rng.standard_normal((3, 2, 2))
        m = np.array([[1, 0], [0, 1]])
        np.testing.assert_allclose(mask_avg_pool(t64(f), t64(m)).numpy(), oracles.masked_mean(f, m), atol=1e-12)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            mask_avg_pool(torch.ones(3, 2, 2), torch.zeros(2, 2))

    def test_batched_empty_member_raises(self):
        m = torch.ones(2, 2, 2)
        m[1] = 0
        with pytest.raises(EmptyMaskError):
            mask_avg_pool(torch.ones(2, 3, 2, 2), m)


class TestSimilarity:
    def test_orthonormal_self_similarity_is_identity(self):
        cols = torch.eye(4, dtype=torch.float64)  # 4 channels, 4 pixels
        f = cols.reshape(4, 2, 2)
        np.testing.assert_allclose(similarity_matrix(f, f), np.eye(4), atol=1e-6)

    def test_bounded_and_symmetric(self, rng):
        f = t64(rng.standard_normal((6, 3, 3)) * 10)
        s = similarity_matrix(f, f)
        assert s.abs().max() <= 1 + 1e-6
        np.testing.assert_allclose(s, s.T, atol=1e-12)
        np.testing.assert_allclose(s.diagonal(), 1.0, atol=1e-6)

    def test_matches_loop(self, rng):
        ft, fr = rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2))
        np.testing.assert_allclose(similarity_matrix(t64(ft), t64(fr)).numpy(), oracles.similarity(ft, fr), atol=1e-6)


class TestPseudoMask:
    def test_self_retrieval(self):
        f = torch.eye(9, dtype=torch.float64).reshape(9, 3, 3)
        m = torch.tensor([[1, 0, 0], [0, 1, 1], [0, 0, 0]], dtype=torch.float64)
        pm = pseudo_mask(similarity_matrix(f, f), m)
        assert torch.all(pm[m == 1] == 1)
        assert torch.all(pm[m == 0] < 1)

    def test_constant_map_is_half(self):
        s = torch.ones(4, 4, dtype=torch.float64) * 0.3
        assert torch.equal(pseudo_mask(s, torch.ones(2, 2)), torch.full((2, 2), 0.5, dtype=torch.float64))

    def test_matches_loop(self, rng):
        s = rng.uniform(-1, 1, size=(9, 9))
        m = np.zeros((3, 3))
        m.flat[[0, 4, 7]] = 1
        np.testing.assert_allclose(pseudo_mask(t64(s), t64(m)).numpy(), oracles.pseudo(s, m), atol=1e-6)

    def test_empty_reference_raises(self):
        with pytest.raises(EmptyMaskError):
            pseudo_mask(torch.ones(4, 4), torch.zeros(2, 2))


class TestAttentionMask:
    def test_exact_match_pixel_gets_one(self):
        f = torch.zeros(4, 2, 2, dtype=torch.float64)
        text = torch.tensor([1.0, 0, 0, 0], dtype=torch.float64)
        f[:, 0, 1] = text
        f[1, 0, 0] = f[2, 1, 0] = f[3, 1, 1] = 1
        am = attention_mask(f, text)
        assert am[0, 1] == 1
        assert am.sum() == 1

    def test_range(self, rng):
        am = attention_mask(t64(rng.standard_normal((8, 5, 5))), t64(rng.standard_normal(8)))
        assert am.min() >= 0 and am.max() <= 1

    def test_matches_loop(self, rng):
        f, t = rng.standard_normal((6, 3, 3)), rng.standard_normal(6)
        np.testing.assert_allclose(attention_mask(t64(f), t64(t)).numpy(), oracles.text_attention(f, t), atol=1e-6)

    def test_zero_text_raises(self):
        with pytest.raises(ZeroNormError):
            attention_mask(torch.ones(3, 2, 2), torch.zeros(3))

    def test_oracle_episodes_highlight_object(self):
        bundle = make_backbones()
        wins = 0
        for seed in range(100):
            ep = generate_episode(seed, seed % 20)
            am = attention_mask(bundle.vlm_encode_image(ep.target_image), bundle.vlm_encode_text(ep.text_label))
            inside = downsample_mask(ep.gt_mask, 8).bool()
            if inside.any() and (~inside).any():
                wins += bool(am[inside].mean() > am[~inside].mean())
            else:
                wins += 1
        assert wins >= 95


def test_minmax_constant_and_range(rng):
    assert torch.all(minmax_normalize(torch.full((3, 3), 2.0)) == 0.5)
    x = minmax_normalize(t64(rng.standard_normal((4, 4))))
    assert x.min() == 0 and x.max() == 1


class TestEnhance:
    def test_zero_weights_give_bias(self, rng):
        c = 8
        b = t64(rng.standard_normal(c))
        out = enhance_features(
            t64(rng.standard_normal((c, 4, 4))), t64(rng.standard_normal(c)), t64(rng.standard_normal(c)),
            torch.ones(4, 4), torch.rand(4, 4, dtype=torch.float64), torch.zeros(c, 3 * c + 2, dtype=torch.float64), b,
        )
        assert torch.equal(out, b[:, None, None].expand(c, 4, 4))

    def test_shape_contract(self):
        c = 64
        out = enhance_features(torch.randn(c, 8, 8), torch.randn(c), torch.randn(c), torch.ones(8, 8),
                               torch.rand(8, 8), torch.randn(c, 3 * c + 2), torch.randn(c))
        assert out.shape == (64, 8, 8)

    def test_text_free_shape_contract(self):
        c = 64
        out = enhance_features(torch.randn(c, 8, 8), torch.randn(c), None, torch.ones(8, 8), None,
                               torch.randn(c, 2 * c + 1), torch.randn(c))
        assert out.shape == (64, 8, 8)

    @pytest.mark.parametrize("text_free", [False, True])
    def test_matches_loop(self, rng, text_free):
        c = 5
        f, p, t = rng.standard_normal((c, 3, 3)), rng.standard_normal(c), rng.standard_normal(c)
        m1, m2 = rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3))
        n_in = 2 * c + 1 if text_free else 3 * c + 2
        w, b = rng.standard_normal((4, n_in)), rng.standard_normal(4)
        if text_free:
            t = m2 = None
        out = enhance_features(t64(f), t64(p), None if t is None else t64(t), t64(m1),
                               None if m2 is None else t64(m2), t64(w), t64(b))
        np.testing.assert_allclose(out.numpy(), oracles.enhance(f, p, t, m1, m2, w, b), atol=1e-6)


def block_params(blk: AttentionBlock):
    sd = {k: v.detach().numpy() for k, v in blk.state_dict().items()}
    p = {
        "q_w": sd["attn.q_proj.weight"], "q_b": sd["attn.q_proj.bias"],
        "k_w": sd["attn.k_proj.weight"], "k_b": sd["attn.k_proj.bias"],
        "v_w": sd["attn.v_proj.weight"], "v_b": sd["attn.v_proj.bias"],
        "o_w": sd["attn.out_proj.weight"], "o_b": sd["attn.out_proj.bias"],
        "nq_g": sd["norm_q.weight"], "nq_b": sd["norm_q.bias"],
        "nf_g": sd["norm_ffn.weight"], "nf_b": sd["norm_ffn.bias"],
        "f1_w": sd["ffn.0.weight"], "f1_b": sd["ffn.0.bias"],
        "f2_w": sd["ffn.2.weight"], "f2_b": sd["ffn.2.bias"],
    }
    if blk.cross:
        p.update(nkv_g=sd["norm_kv.weight"], nkv_b=sd["norm_kv.bias"])
    return p


def randomize(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for prm in module.parameters():
            prm.copy_(torch.randn(prm.shape, generator=g, dtype=prm.dtype) * 0.5)
    return module


class TestAttend:
    def test_shape_contract(self):
        blk = QueryAttention(64, 8)
        assert attend(torch.randn(50, 64), torch.randn(64, 8, 8), blk).shape == (50, 64)

    def test_single_key_attention_copies_value(self):
        blk = AttentionBlock(4, heads=1, cross=True).double()
        with torch.no_grad():
            for lin in (blk.attn.v_proj, blk.attn.out_proj):
                lin.weight.copy_(torch.eye(4))
                lin.bias.zero_()
        q = torch.tensor([[0.3, -1.0, 2.0, 0.5]], dtype=torch.float64)
        key = torch.tensor([[1.0, 2.0, -1.0, 0.0]], dtype=torch.float64)
        residual = q + blk.attn(blk.norm_q(q), blk.norm_kv(key), blk.norm_kv(key))
        # softmax over a single logit is 1, so the update is the key's value exactly
        np.testing.assert_allclose(residual.detach(), (q + blk.norm_kv(key)).detach(), atol=1e-12)

    def test_matches_explicit_softmax_attention(self):
        torch.manual_seed(0)
        blk = randomize(QueryAttention(4, heads=2, ffn_mult=2).double(), seed=3)
        q = torch.randn(2, 4, dtype=torch.float64)
        feats = torch.randn(4, 1, 3, dtype=torch.float64)
        out = attend(q, feats, blk).detach().numpy()
        tokens = feats.flatten(1).T.numpy()
        x = oracles.block(q.numpy(), tokens, block_params(blk.cross_attn), 2, cross=True)
        x = oracles.block(x, None, block_params(blk.self_attn), 2, cross=False)
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_key_permutation_invariance(self):
        blk = QueryAttention(16, 4).double()
        q = torch.randn(5, 16, dtype=torch.float64)
        f = torch.randn(16, 3, 3, dtype=torch.float64)
        perm = torch.randperm(9)
        f_perm = f.flatten(1)[:, perm].reshape(16, 3, 3)
        np.testing.assert_allclose(attend(q, f, blk).detach(), attend(q, f_perm, blk).detach(), atol=1e-10)


@pytest.fixture(scope="module")
def bundle():
    return make_backbones()


class TestEncoder:
    def test_encode_prompts_shape_and_permutation_invariance(self):
        enc = VlpEncoder().double()
        fr = torch.randn(64, 8, 8, dtype=torch.float64)
        ft = torch.randn(64, 8, 8, dtype=torch.float64)
        out = enc.encode_prompts(fr, ft)
        assert out.shape == (50, 64)
        perm = torch.randperm(64)
        ft_perm = ft.flatten(1)[:, perm].reshape(64, 8, 8)
        np.testing.assert_allclose(out.detach(), enc.encode_prompts(fr, ft_perm).detach(), atol=1e-6)

    def test_parameter_budget(self):
        assert VlpEncoder().parameter_count() < 2_000_000

    def test_forward_shape_finite_deterministic(self, bundle):
        enc = VlpEncoder()
        ep = generate_episode(3, 5)
        a = forward(ep, bundle, enc)
        b = forward(ep, bundle, enc)
        assert a.shape == (64, 64)
        assert torch.isfinite(a).all()
        assert torch.equal(a, b)

    def test_text_free_never_calls_text_encoder(self, bundle):
        enc = VlpEncoder(config=ModelConfig(mode="text-free"))
        before = bundle.vlm.text_calls
        forward(generate_episode(4, 2), bundle, enc)
        assert bundle.vlm.text_calls == before
        assert enc.enhance_tgt.in_channels == 2 * 64 + 1

    def test_mode_mismatch(self, bundle):
        with pytest.raises(ModeMismatchError):
            forward(generate_episode(4, 2), bundle, VlpEncoder(), mode="text-free")

    def test_empty_reference_mask_propagates(self, bundle):
        ep = generate_episode(4, 2)
        ep.reference_mask = np.zeros_like(ep.reference_mask)
        with pytest.raises(EmptyMaskError):
            forward(ep, bundle, VlpEncoder())

    def test_every_parameter_gets_gradient(self, bundle):
        from vlpseg.objectives import total_loss

        enc = VlpEncoder()
        ep = generate_episode(8, 1)
        loss = total_loss(forward(ep, bundle, enc), torch.as_tensor(ep.gt_mask, dtype=torch.float32)).total
        loss.backward()
        for name, prm in enc.named_parameters():
            assert prm.grad is not None and prm.grad.abs().sum() > 0, name


@st.composite
def feature_case(draw):
    c, h, w = draw(st.integers(1, 6)), draw(st.integers(1, 4)), draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31 - 1))
    r = np.random.default_rng(seed)
    scale = draw(st.sampled_from([1e-3, 1.0, 1e3]))
    mask = (r.uniform(size=(h, w)) < 0.5).astype(float)
    mask.flat[r.integers(h * w)] = 1.0
    return r.standard_normal((c, h, w)) * scale, r.standard_normal((c, h, w)) * scale, mask


@settings(max_examples=60, deadline=None)
@given(feature_case())
def test_soft_masks_and_similarity_stay_in_range(case):
    ft, fr, m = case
    s = similarity_matrix(t64(ft), t64(fr))
    assert s.abs().max() <= 1 + 1e-6
    pm = pseudo_mask(s, t64(m))
    assert pm.min() >= 0 and pm.max() <= 1
    np.testing.assert_allclose(pm.numpy(), oracles.pseudo(oracles.similarity(ft, fr), m), atol=1e-6)
    np.testing.assert_allclose(mask_avg_pool(t64(fr), t64(m)).numpy(), oracles.masked_mean(fr, m),
                               atol=1e-6 * max(1.0, np.abs(fr).max()))


@settings(max_examples=40, deadline=None)
@given(feature_case())
def test_self_similarity_is_symmetric_with_unit_diagonal(case):
    f = t64(case[0])
    s = similarity_matrix(f, f)
    np.testing.assert_allclose(s, s.T, atol=1e-12)
    sq = (f.flatten(1) ** 2).sum(0).numpy()
    np.testing.assert_allclose(s.diagonal(), sq / (sq + 1e-8), atol=1e-6)  # eps only bites on tiny pixels
