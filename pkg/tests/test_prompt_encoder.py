import numpy as np
import pytest

from prelab import autodiff as ad
from prelab.autodiff import Tensor
from prelab.backbone import embed_tokens
from prelab.errors import ValidationError
from prelab.numerics import finite_diff_check
from prelab.prompt_encoder import (
    EncoderConfig,
    PromptEncoder,
    bilstm_apply,
    bilstm_weight_count,
    count_trainable_params,
    init_prompts,
    mlp_apply,
    reparameterize,
    transformer_apply,
)

# M=2, d=2 BiLSTM: weights below, output from a scalar unrolling of the gate
# equations written with the math module only
LSTM_FWD = {
    "weight_ih": [[0.5, -0.3], [0.2, 0.1], [0.7, 0.4], [-0.6, 0.9]],
    "weight_hh": [[0.3], [-0.2], [0.5], [0.1]],
    "bias_ih": [0.1, 0.0, -0.1, 0.2],
    "bias_hh": [0.0, 0.3, 0.05, -0.1],
}
LSTM_BWD = {
    "weight_ih": [[-0.4, 0.2], [0.6, -0.5], [0.3, 0.8], [0.2, 0.2]],
    "weight_hh": [[-0.1], [0.4], [-0.6], [0.2]],
    "bias_ih": [0.0, -0.2, 0.1, 0.0],
    "bias_hh": [0.2, 0.1, 0.0, 0.3],
}
LSTM_V = [[1.0, -2.0], [0.5, 0.25]]
LSTM_EXPECTED = [[-0.010381191443211429, -0.06469273324716068],
                 [0.07229932603215225, 0.1300138732578233]]

ARCHS = ("bilstm", "mlp", "transformer")


def _lstm_params():
    p = {}
    for prefix, src in (("fwd", LSTM_FWD), ("bwd", LSTM_BWD)):
        for k, v in src.items():
            p[f"{prefix}.{k}"] = Tensor(v)
    return p


def _zeroed(arch, d=8, M=4, **kw):
    enc = PromptEncoder(EncoderConfig(architecture=arch, **kw), d, M)
    for t in enc.parameters():
        t.data = np.zeros_like(t.data)
    return enc


class TestInitPrompts:
    def test_template(self, small_backbone):
        p = init_prompts("template", 4, small_backbone.vocab)
        assert np.array_equal(p.vectors.data, embed_tokens(small_backbone.vocab, ["a", "photo", "of", "a"]).data)
        assert p.vectors.requires_grad

    def test_template_wrong_length(self, small_backbone):
        with pytest.raises(ValidationError):
            init_prompts("template", 8, small_backbone.vocab)

    def test_gaussian_std_pooled_over_seeds(self, small_backbone):
        draws = np.concatenate([init_prompts("gaussian", 4, small_backbone.vocab, seed=s).vectors.data.ravel()
                                for s in range(100)])
        assert abs(draws.std() - 0.02) < 0.2 * 0.02

    def test_gaussian_is_seeded(self, small_backbone):
        a = init_prompts("gaussian", 4, small_backbone.vocab, seed=7).vectors.data
        b = init_prompts("gaussian", 4, small_backbone.vocab, seed=7).vectors.data
        assert np.array_equal(a, b)

    def test_padded(self, small_backbone):
        v = small_backbone.vocab
        p = init_prompts("padded", 6, v).vectors.data
        assert np.array_equal(p, embed_tokens(v, ["X", "X", "a", "photo", "of", "a"]).data)

    def test_unknown_mode(self, small_backbone):
        with pytest.raises(ValidationError):
            init_prompts("uniform", 4, small_backbone.vocab)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"architecture": "gru"}, {"sharing": "some"}, {"dropout": 1.0},
                                    {"dropout": -0.1}, {"bottleneck_dim": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            EncoderConfig(**kw)

    def test_odd_width_bilstm(self):
        with pytest.raises(ValidationError):
            PromptEncoder(EncoderConfig(architecture="bilstm"), 7, 4)


class TestBiLSTM:
    def test_hand_unrolled(self):
        out = bilstm_apply(_lstm_params(), Tensor(LSTM_V)).data
        assert np.allclose(out, LSTM_EXPECTED, atol=1e-15, rtol=0)

    def test_zero_network(self, rng):
        enc = _zeroed("bilstm")
        assert not np.any(bilstm_apply(enc.param_sets[0], rng.normal(size=(4, 8))).data)

    def test_single_token_is_two_single_steps(self):
        p = _lstm_params()
        out = bilstm_apply(p, Tensor([LSTM_V[0]])).data
        # each direction sees the same token from zero state: first fwd step of the hand example
        assert out[0, 0] == pytest.approx(LSTM_EXPECTED[0][0], abs=1e-15)
        # running the backward weights as a forward LSTM gives the same single step
        swapped = {k.replace("bwd", "fwd") if k.startswith("bwd") else k.replace("fwd", "bwd"): v for k, v in p.items()}
        assert out[0, 1] == bilstm_apply(swapped, Tensor([LSTM_V[0]])).data[0, 0]

    def test_hidden_is_half_width(self):
        enc = PromptEncoder(EncoderConfig(architecture="bilstm"), 8, 4)
        assert enc.param_sets[0]["fwd.weight_hh"].shape == (16, 4)


class TestMLP:
    def test_hand_evaluated_dead_relu(self):
        params = {"down.w": Tensor([[1.0], [1.0]]), "down.b": Tensor([-5.0]),
                  "up.w": Tensor([[2.0, -3.0]]), "up.b": Tensor([0.25, -0.5])}
        assert mlp_apply(params, Tensor([1.0, 2.0])).data.tolist() == [0.25, -0.5]

    def test_hand_evaluated_live_relu(self):
        params = {"down.w": Tensor([[1.0], [1.0]]), "down.b": Tensor([-1.0]),
                  "up.w": Tensor([[2.0, -3.0]]), "up.b": Tensor([0.25, -0.5])}
        # relu(1 + 2 - 1) = 2 -> (4.25, -6.5)
        assert mlp_apply(params, Tensor([1.0, 2.0])).data.tolist() == [4.25, -6.5]

    def test_zero_up_projection(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="mlp"), 8, 4)
        enc.param_sets[0]["up.w"].data = np.zeros((4, 8))
        enc.param_sets[0]["up.b"].data = np.zeros(8)
        assert not np.any(mlp_apply(enc.param_sets[0], rng.normal(size=(4, 8))).data)

    def test_eval_mode_is_deterministic(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="mlp", dropout=0.5), 8, 4)
        V = rng.normal(size=(4, 8))
        assert np.array_equal(reparameterize(enc, V).data, reparameterize(enc, V).data)

    def test_training_mode_applies_dropout(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="mlp", dropout=0.5, residual=False), 8, 4)
        V = rng.normal(size=(4, 8))
        a = reparameterize(enc, V, training=True).data
        assert np.any(a == 0.0) and not np.array_equal(a, reparameterize(enc, V).data)


class TestTransformer:
    def test_permutation_equivariance(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="transformer"), 8, 5)
        p = enc.param_sets[0]
        for t in p.values():
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        V = rng.normal(size=(5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        a = transformer_apply(p, V).data[perm]
        b = transformer_apply(p, V[perm]).data
        assert np.allclose(a, b, atol=1e-12)

    def test_single_token_equals_value_path(self, rng):
        # with one key the attention weights are exactly 1, so only the value path matters
        enc = PromptEncoder(EncoderConfig(architecture="transformer"), 8, 1)
        p = enc.param_sets[0]
        V = rng.normal(size=(1, 8))
        before = transformer_apply(p, V).data
        for i in (0, 1):
            w = p[f"layer{i}.qkv.w"].data.copy()
            w[:, :16] = rng.normal(size=(8, 16))  # scramble queries and keys
            p[f"layer{i}.qkv.w"].data = w
        assert np.allclose(before, transformer_apply(p, V).data, atol=1e-13)

    def test_heads_must_divide(self):
        with pytest.raises(ValidationError):
            PromptEncoder(EncoderConfig(architecture="transformer", heads=3), 8, 4)


class TestReparameterize:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_zero_network_residual_identity(self, arch, rng):
        V = rng.normal(size=(4, 8))
        assert np.array_equal(reparameterize(_zeroed(arch), V, training=True).data, V)

    @pytest.mark.parametrize("arch", ARCHS)
    def test_zero_network_without_residual(self, arch, rng):
        V = rng.normal(size=(4, 8))
        assert not np.any(reparameterize(_zeroed(arch, residual=False), V).data)

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("sharing", ["shared", "separate"])
    def test_identity_start(self, arch, sharing, rng):
        enc = PromptEncoder(EncoderConfig(architecture=arch, sharing=sharing, identity_start=True), 8, 4)
        V = rng.normal(size=(4, 8))
        assert np.array_equal(reparameterize(enc, V, training=True).data, V)
        # only the output path is zeroed, the rest stays random
        assert any(np.any(t.data) for t in enc.parameters())

    def test_none_returns_input(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="none"), 8, 4)
        V = Tensor(rng.normal(size=(4, 8)))
        assert reparameterize(enc, V) is V
        assert enc.parameters() == []

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("sharing", ["shared", "separate"])
    def test_shape_preserved(self, arch, sharing, rng):
        enc = PromptEncoder(EncoderConfig(architecture=arch, sharing=sharing), 8, 3)
        assert reparameterize(enc, rng.normal(size=(3, 8)), training=True).shape == (3, 8)

    def test_separate_routes_each_token_alone(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="bilstm", sharing="separate", residual=False), 8, 3)
        V = rng.normal(size=(3, 8))
        out = reparameterize(enc, V).data
        for i in range(3):
            assert np.array_equal(out[i], bilstm_apply(enc.param_sets[i], V[i:i + 1]).data[0])

    def test_separate_token_count_mismatch(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="mlp", sharing="separate"), 8, 3)
        with pytest.raises(ValidationError):
            reparameterize(enc, rng.normal(size=(4, 8)))

    def test_width_mismatch(self, rng):
        enc = PromptEncoder(EncoderConfig(architecture="mlp"), 8, 4)
        with pytest.raises(ValidationError):
            reparameterize(enc, rng.normal(size=(4, 6)))

    @pytest.mark.parametrize("arch", ARCHS)
    def test_gradient_through_encoder(self, arch, rng):
        enc = PromptEncoder(EncoderConfig(architecture=arch, dropout=0.0), 4, 3)
        for t in enc.parameters():
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        w = rng.normal(size=(3, 4))
        V = rng.normal(size=(3, 4))
        assert finite_diff_check(lambda v: ad.sum_(reparameterize(enc, v) * w), V, eps=1e-5) < 1e-6


class TestCounting:
    def test_examples(self, small_backbone):
        V = init_prompts("gaussian", 4, small_backbone.vocab)
        assert count_trainable_params(PromptEncoder(EncoderConfig(architecture="none"), 8, 4), V) == 32
        assert count_trainable_params(PromptEncoder(EncoderConfig(architecture="bilstm"), 8, 4), V) == 480
        sep = PromptEncoder(EncoderConfig(architecture="bilstm", sharing="separate"), 8, 4)
        assert count_trainable_params(sep, V) == 1824

    def test_enumeration(self):
        # per direction: 4H*d + 4H*H + 2*4H with H = d/2
        d = 8
        H = d // 2
        per_direction = 4 * H * d + 4 * H * H + 2 * 4 * H
        enc = PromptEncoder(EncoderConfig(architecture="bilstm"), d, 4)
        assert sum(t.data.size for t in enc.parameters()) == 2 * per_direction == 448

    @pytest.mark.parametrize("d", [2, 8, 32, 512])
    def test_weight_count_is_six_d_squared(self, d):
        assert bilstm_weight_count(d) == 6 * d * d
        assert bilstm_weight_count(d) != 3 * d * d

    def test_mlp_and_transformer_counts(self):
        d = 8
        mlp = PromptEncoder(EncoderConfig(architecture="mlp"), d, 4)
        assert sum(t.data.size for t in mlp.parameters()) == d * 4 + 4 + 4 * d + d
        tr = PromptEncoder(EncoderConfig(architecture="transformer"), d, 4)
        per_layer = d * 3 * d + 2 * d + d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d + 2 * d
        assert sum(t.data.size for t in tr.parameters()) == 2 * per_layer
