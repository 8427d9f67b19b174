import numpy as np
import pytest

from agdiff.autodiff import Tensor, grad_check
from agdiff.nn import (
    Mlp,
    init_heads,
    init_lstm,
    init_mlp,
    init_noise_predictor,
    init_policy,
    load_checkpoint,
    load_policy_arrays,
    lstm_forward,
    policy_to_arrays,
    save_checkpoint,
    timestep_embed,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestMlp:
    def test_zero_weights_zero_output(self):
        mlp = init_mlp([3, 4, 2], seed=0)
        for W in mlp.weights:
            W.data[:] = 0.0
        out = mlp(Tensor(np.ones(3)))
        np.testing.assert_array_equal(out.data, np.zeros(2))

    def test_identity_layer(self):
        mlp = Mlp([Tensor(np.eye(4))], [Tensor(np.zeros(4))], ["linear"])
        x = np.arange(4.0)
        np.testing.assert_array_equal(mlp(Tensor(x)).data, x)

    def test_matches_straight_line_oracle(self):
        mlp = init_mlp([3, 5, 2], seed=3)
        x = np.random.default_rng(1).standard_normal(3)
        W0, b0 = mlp.weights[0].data, mlp.biases[0].data
        W1, b1 = mlp.weights[1].data, mlp.biases[1].data
        expected = np.tanh(x @ W0 + b0) @ W1 + b1
        np.testing.assert_allclose(mlp(Tensor(x)).data, expected, atol=1e-12)

    def test_batched_matches_loop(self):
        mlp = init_mlp([3, 6, 2], seed=9)
        X = np.random.default_rng(2).standard_normal((7, 3))
        batched = mlp(Tensor(X)).data
        rows = np.stack([mlp(Tensor(x)).data for x in X])
        np.testing.assert_allclose(batched, rows, atol=1e-14)


class TestLstm:
    def test_zero_weights_fixed_point(self):
        lstm = init_lstm(2, 4, 2, seed=0)
        for W in lstm.w:
            W.data[:] = 0.0
        seq = np.random.default_rng(0).standard_normal((3, 5, 2))
        hs = lstm_forward(lstm, seq, np.arange(1.0, 6.0))
        for h in hs:
            np.testing.assert_array_equal(h.data, np.zeros((3, 4)))

    def test_single_step_manual_cell(self):
        H = 3
        lstm = init_lstm(2, H, 1, seed=5)
        x_raw = np.array([[0.3, -0.7]])
        t0 = 0.4
        hs = lstm_forward(lstm, x_raw[None], np.array([t0]))

        xin = np.concatenate([x_raw[0], [t0 - 0.0], np.zeros(H)])
        gates = xin @ lstm.w[0].data + lstm.b[0].data
        i, f, g, o = gates[:H], gates[H:2 * H], gates[2 * H:3 * H], gates[3 * H:]
        c = sigmoid(i) * np.tanh(g)
        h = sigmoid(o) * np.tanh(c)
        np.testing.assert_allclose(hs[0].data[0], h, rtol=1e-12)

    def test_batch_equivariance(self):
        lstm = init_lstm(2, 4, 2, seed=1)
        rng = np.random.default_rng(3)
        seq = rng.standard_normal((4, 6, 2))
        times = np.cumsum(rng.uniform(0.1, 1.0, size=6))
        hs = lstm_forward(lstm, seq, times)
        perm = np.array([2, 0, 3, 1])
        hs_p = lstm_forward(lstm, seq[perm], times)
        for a, b in zip(hs, hs_p):
            np.testing.assert_allclose(b.data, a.data[perm], atol=1e-14)

    def test_non_increasing_times_rejected(self):
        lstm = init_lstm(1, 2, 1, seed=0)
        with pytest.raises(ValueError, match="increasing"):
            lstm_forward(lstm, np.zeros((1, 3, 1)), np.array([0.1, 0.1, 0.3]))


class TestTimestepEmbed:
    def test_k_zero(self):
        emb = timestep_embed(0, 8)
        np.testing.assert_array_equal(emb[0::2], np.zeros(4))
        np.testing.assert_array_equal(emb[1::2], np.ones(4))

    def test_dim2_base_frequency(self):
        np.testing.assert_allclose(timestep_embed(1, 2), [np.sin(1.0), np.cos(1.0)], rtol=1e-15)

    def test_injective_on_range(self):
        embs = timestep_embed(np.arange(10_000), 16)
        # base frequency 1 makes the leading sin/cos pair unique per integer k
        assert len(np.unique(embs.round(12), axis=0)) == 10_000

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            timestep_embed(1, 3)


class TestNoisePredictor:
    def test_zero_weights(self):
        pred = init_noise_predictor(6, 4, 8, [10], seed=0)
        for W in pred.mlp.weights:
            W.data[:] = 0.0
        out = pred(Tensor(np.ones(6)), Tensor(np.ones(4)), 3)
        np.testing.assert_array_equal(out.data, np.zeros(6))

    def test_output_shape_contract(self):
        pred = init_noise_predictor(8, 5, 4, [16, 16], seed=2)
        out = pred(Tensor(np.zeros(8)), Tensor(np.zeros(5)), 7)
        assert out.shape == (8,)
        out_b = pred(Tensor(np.zeros((3, 8))), Tensor(np.zeros((3, 5))), 7)
        assert out_b.shape == (3, 8)

    def test_gradient_wrt_latent(self):
        pred = init_noise_predictor(6, 4, 4, [12], seed=4)
        a = Tensor(np.random.default_rng(0).standard_normal(6))
        err = grad_check(lambda z: pred(a, z, 5), Tensor(np.random.default_rng(1).standard_normal(4)))
        assert err < 1e-5


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_mlp([4, 8, 2], seed=77)
        b = init_mlp([4, 8, 2], seed=77)
        for wa, wb in zip(a.weights, b.weights):
            assert wa.data.tobytes() == wb.data.tobytes()

    def test_different_seeds_differ(self):
        a = init_mlp([4, 8, 2], seed=1)
        b = init_mlp([4, 8, 2], seed=2)
        assert not np.array_equal(a.weights[0].data, b.weights[0].data)

    def test_fan_in_bound(self):
        for n in (3, 17, 64):
            mlp = init_mlp([n, 32], seed=n)
            assert np.all(np.abs(mlp.weights[0].data) <= np.sqrt(6.0 / n) + 1e-15)

    def test_biases_zero(self):
        mlp = init_mlp([5, 7, 3], seed=0)
        for b in mlp.biases:
            np.testing.assert_array_equal(b.data, 0.0)


class TestDifferentiability:
    def test_encoder_grad(self):
        enc = init_mlp([6, 12, 4], seed=8)
        assert grad_check(enc, Tensor(np.random.default_rng(5).standard_normal(6))) < 1e-5

    def test_heads_sigma_positive(self):
        heads = init_heads(5, seed=3)
        for scale in (1.0, 50.0, -50.0):
            _, logvar = heads(Tensor(np.full(5, scale)))
            assert np.all(np.exp(0.5 * logvar.data) > 0.0)

    def test_lstm_grad_wrt_weights(self):
        lstm = init_lstm(2, 3, 1, seed=6)
        seq = np.random.default_rng(7).standard_normal((2, 4, 2))
        times = np.array([0.2, 0.5, 1.1, 1.4])
        W = lstm.w[0]

        def f(w):
            lstm.w[0] = w
            hs = lstm_forward(lstm, seq, times)
            total = hs[0].sum()
            for h in hs[1:]:
                total = total + h.sum()
            return total

        err = grad_check(f, Tensor(W.data), step=1e-5)
        lstm.w[0] = W
        assert err < 1e-5


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(7)}
        path = tmp_path / "ck.agdf"
        save_checkpoint(path, arrays, meta={"note": "test"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"note": "test"}
        for k in arrays:
            assert loaded[k].tobytes() == arrays[k].tobytes()
            assert loaded[k].shape == arrays[k].shape

    def test_policy_roundtrip(self, tmp_path):
        model = init_policy(obs_dim=6, latent_dim=4, horizon=3, action_dim=2, seed=1,
                            enc_hidden=8, eps_hidden=(8, 8), embed_dim=4)
        path = tmp_path / "policy.agdf"
        save_checkpoint(path, policy_to_arrays(model))
        clone = init_policy(obs_dim=6, latent_dim=4, horizon=3, action_dim=2, seed=999,
                            enc_hidden=8, eps_hidden=(8, 8), embed_dim=4)
        arrays, _ = load_checkpoint(path)
        load_policy_arrays(clone, arrays)
        for name, p in model.parameters().items():
            assert clone.parameters()[name].data.tobytes() == p.data.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.agdf"
        path.write_bytes(b"NOPE....")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
