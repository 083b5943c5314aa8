import math
from collections import Counter

import numpy as np
import pytest

from glora import tensor as T
from glora.errors import ConfigurationError, ContractError, DivergenceError
from glora.layer import NONE, LayerConfig, LayerSearchSpace, forward_adapter, lora, reparameterize
from glora.supernet import (
    TrainSchedule,
    adamw_step,
    build_model,
    cosine_lr,
    evaluate,
    forward,
    model_flops,
    pretrain,
    sample_subnet,
    train_supernet,
)
from glora.synth import Dataset, gen_pretrain_task
from glora.tensor import DenseMatrix, Tape


def tiny_task(seed=0, n=200, d=4, k=2):
    data, _ = gen_pretrain_task(d, k, n, seed)
    return data


class TestBuildModel:
    def test_mlp_shapes(self):
        m = build_model("mlp", [4, 8, 3], 0)
        assert [l.W0.shape for l in m.layers] == [(8, 4), (3, 8)]
        assert m.labels == ["plain", "plain"]

    def test_attention_shapes(self):
        m = build_model("mini-attention", [8, 3], 0)
        assert m.labels[:4] == ["qkv", "projection", "fc1", "fc2"]
        assert [l.W0.shape for l in m.layers] == [(24, 8), (8, 8), (32, 8), (8, 32), (3, 8)]

    def test_deterministic(self):
        a, b = build_model("mlp", [3, 5, 2], 7), build_model("mlp", [3, 5, 2], 7)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.W0.data, lb.W0.data)
            assert all(np.array_equal(la.factors[k].data, lb.factors[k].data) for k in la.factors)

    @pytest.mark.parametrize("kind,dims", [("mlp", [4]), ("mlp", [4, 0]), ("mini-attention", [4, 2, 1]), ("cnn", [1, 2])])
    def test_bad_dims(self, kind, dims):
        with pytest.raises(ConfigurationError):
            build_model(kind, dims, 0)

    def test_initial_factors(self):
        layer = build_model("mlp", [30, 40], 0, r_max=4).layers[0]
        for name in ("A_u", "B_u", "C_u", "D", "E"):
            assert not layer.factors[name].data.any()
        assert abs(layer.factors["A_d"].data.std() - 0.02) < 0.004


class TestForward:
    def test_mlp_matches_manual(self, rng):
        m = build_model("mlp", [3, 4, 2], 1)
        x = rng.standard_normal((5, 3))
        h = m.layers[0].W0.data @ x.T + m.layers[0].b0.data
        h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
        y = m.layers[1].W0.data @ h + m.layers[1].b0.data
        np.testing.assert_allclose(forward(m, x).data, y, atol=1e-12)

    def test_attention_samples_independent(self, rng):
        m = build_model("mini-attention", [4, 3], 2, tokens=3)
        x = rng.standard_normal((6, 12))
        batch = forward(m, x).data
        for i in range(6):
            np.testing.assert_allclose(forward(m, x[i : i + 1]).data[:, 0], batch[:, i], atol=1e-10)

    def test_attention_manual(self, rng):
        d, t = 4, 3
        m = build_model("mini-attention", [d, 2], 3, tokens=t)
        x = rng.standard_normal((1, d * t))
        H = x.reshape(t, d).T
        W = [l.W0.data for l in m.layers]
        b = [l.b0.data for l in m.layers]
        qkv = W[0] @ H + b[0]
        q, k, v = qkv[:d], qkv[d : 2 * d], qkv[2 * d :]
        s = (q.T @ k) / np.sqrt(d)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        att = v @ (s / s.sum(axis=1, keepdims=True)).T
        H = H + W[1] @ att + b[1]
        f = W[2] @ H + b[2]
        f = 0.5 * f * (1 + np.tanh(np.sqrt(2 / np.pi) * (f + 0.044715 * f**3)))
        H = H + W[3] @ f + b[3]
        out = W[4] @ H.mean(axis=1, keepdims=True) + b[4]
        np.testing.assert_allclose(forward(m, x).data, out, atol=1e-10)

    def test_attention_gradients(self, rng):
        m = build_model("mini-attention", [3, 2], 4, tokens=2, r_max=2)
        m = m.replace_layers([l.with_factors(**{k: DenseMatrix(0.3 * rng.standard_normal(v.shape)) for k, v in l.factors.items()}) for l in m.layers])
        x = rng.standard_normal((3, 6))
        labels = np.array([0, 1, 1])
        cfg = [LayerConfig(lora(2), lora(1), lora(2), T_kind, T_kind) for T_kind in [NONE] * 5]
        cfg = [c.with_kind("D", k) for c, k in zip(cfg, [NONE] * 5)]

        def loss(tensors):
            return T.softmax_cross_entropy(forward(m, x, cfg, tensors), labels)

        for i in (0, 2, 4):
            tape = Tape()
            tensors = [{} for _ in m.layers]
            tensors[i]["A_d"] = tape.watch(m.layers[i].factors["A_d"], "g")
            g = T.backward(tape, loss(tensors))["g"].data

            def f(mat):
                ts = [{} for _ in m.layers]
                ts[i]["A_d"] = mat
                return loss(ts).data[0, 0]

            num = T.finite_difference_grad(f, m.layers[i].factors["A_d"]).data
            assert (np.abs(g - num) / (1 + np.abs(g))).max() <= 1e-4

    @pytest.mark.parametrize("kind,dims", [("mlp", [4, 6, 3]), ("mini-attention", [4, 3])])
    def test_merged_model_same_output_and_cost(self, rng, kind, dims):
        m = build_model(kind, dims, 5, r_max=2)
        space = LayerSearchSpace.full((2, 1))
        cfg = sample_subnet([space] * len(m.layers), rng)
        merged = m.replace_layers([reparameterize(l, c) for l, c in zip(m.layers, cfg)])
        x = rng.standard_normal((7, m.input_dim))
        np.testing.assert_allclose(forward(merged, x).data, forward(m, x, cfg).data, atol=1e-10)
        assert merged.base_param_count() == m.base_param_count()
        assert model_flops(merged, 7) == model_flops(m, 7)
        assert merged.is_merged and not m.is_merged


class TestSampling:
    def test_singleton_space(self, rng):
        spaces = [LayerSearchSpace.only_none()] * 3
        assert sample_subnet(spaces, rng) == [LayerConfig()] * 3

    def test_uniform_frequencies(self, rng):
        space = LayerSearchSpace.full((4, 2))
        draws = [sample_subnet([space], rng)[0] for _ in range(10_000)]
        for role in "ABCDE":
            opts = space.options(role)
            counts = Counter(c.kind(role) for c in draws)
            p = 1 / len(opts)
            sd = math.sqrt(10_000 * p * (1 - p))
            for o in opts:
                assert abs(counts[o] - 10_000 * p) <= 5 * sd, (role, o)

    def test_two_option_rate(self, rng):
        space = LayerSearchSpace({"A": ("lora", "none")}, (2,))
        rate = np.mean([sample_subnet([space], rng)[0].a == lora(2) for _ in range(10_000)])
        assert abs(rate - 0.5) <= 0.05

    def test_covers_full_space(self):
        # 500 epochs x 50 iterations of per-layer draws
        rng = np.random.default_rng(0)
        space = LayerSearchSpace.full((4,))
        seen = Counter(sample_subnet([space], rng)[0] for _ in range(25_000))
        assert len(seen) == 432
        assert (1 - 1 / 432) ** 25_000 * 432 < 1e-3


class TestSchedule:
    def test_cosine_examples(self):
        assert cosine_lr(0, 100, 1e-3) == 1e-3
        assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
        last = cosine_lr(199, 200, 1.0)
        assert 0 < last < 0.01

    @pytest.mark.parametrize("step", [-1, 100])
    def test_cosine_range(self, step):
        with pytest.raises(ContractError):
            cosine_lr(step, 100, 1.0)

    def test_cosine_monotone(self):
        vals = [cosine_lr(s, 64, 1.0) for s in range(64)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"w": DenseMatrix([[1.0, -2.0]])}
        out = adamw_step(p, {"w": DenseMatrix.zeros(1, 2)}, {}, 0.1)
        assert np.array_equal(out["w"].data, p["w"].data)

    def test_first_step_closed_form(self, rng):
        g = rng.standard_normal((3, 2))
        p = rng.standard_normal((3, 2))
        out = adamw_step({"w": DenseMatrix(p)}, {"w": DenseMatrix(g)}, {}, 0.01)
        # bias-corrected first moments are g and g^2
        np.testing.assert_allclose(out["w"].data, p - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)

    def test_decay_factor(self):
        out = adamw_step({"w": DenseMatrix([[3.0]])}, {"w": DenseMatrix([[0.0]])}, {}, 0.1, weight_decay=0.5)
        assert out["w"].data[0, 0] == pytest.approx(3.0 * (1 - 0.05), abs=1e-15)

    def test_second_step_reference(self):
        g1, g2 = 0.5, -1.5
        state = {}
        p = adamw_step({"w": DenseMatrix([[1.0]])}, {"w": DenseMatrix([[g1]])}, state, 0.1, weight_decay=0.01)
        p = adamw_step(p, {"w": DenseMatrix([[g2]])}, state, 0.05, weight_decay=0.01)
        # hand-unrolled reference
        w = 1.0
        m = 0.1 * g1; v = 0.001 * g1**2
        w = w * (1 - 0.1 * 0.01) - 0.1 * (m / 0.1) / (math.sqrt(v / 0.001) + 1e-8)
        m = 0.9 * m + 0.1 * g2; v = 0.999 * v + 0.001 * g2**2
        w = w * (1 - 0.05 * 0.01) - 0.05 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p["w"].data[0, 0] == pytest.approx(w, abs=1e-14)
        assert state["w"]["t"] == 2

    def test_no_state_for_frozen(self):
        params = {"a": DenseMatrix([[1.0]]), "frozen": DenseMatrix([[2.0]])}
        state = {}
        out = adamw_step(params, {"a": DenseMatrix([[1.0]])}, state, 0.1)
        assert set(state) == {"a"} and out["frozen"] is params["frozen"]

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adamw_step({"w": DenseMatrix([[1.0]])}, {"w": DenseMatrix([[1.0, 2.0]])}, {}, 0.1)


def _spaces(model, ranks=(2, 1)):
    return [LayerSearchSpace.full(ranks)] * len(model.layers)


class TestTraining:
    def test_zero_epochs_unchanged(self):
        m = build_model("mlp", [4, 2], 0, r_max=2)
        res = train_supernet(m, _spaces(m), tiny_task(), TrainSchedule(epochs=0))
        for a, b in zip(m.layers, res.model.layers):
            assert all(np.array_equal(a.factors[k].data, b.factors[k].data) for k in a.factors)
        assert res.history == [] and res.steps == 0

    def test_frozen_base(self):
        m = build_model("mlp", [4, 5, 2], 0, r_max=2)
        res = train_supernet(m, _spaces(m), tiny_task(), TrainSchedule(epochs=50, batch_size=32, lr=1e-2))
        for a, b in zip(m.layers, res.model.layers):
            assert np.array_equal(a.W0.data, b.W0.data) and np.array_equal(a.b0.data, b.b0.data)
        assert any(not np.array_equal(a.factors["E"].data, b.factors["E"].data) for a, b in zip(m.layers, res.model.layers))

    def test_deterministic(self):
        m = build_model("mlp", [4, 2], 0, r_max=2)
        s = TrainSchedule(epochs=3, batch_size=16, lr=1e-2, seed=5)
        a = train_supernet(m, _spaces(m), tiny_task(), s)
        b = train_supernet(m, _spaces(m), tiny_task(), s)
        assert a.history == b.history
        for la, lb in zip(a.model.layers, b.model.layers):
            assert all(np.array_equal(la.factors[k].data, lb.factors[k].data) for k in la.factors)

    def test_loss_decreases_majority(self):
        wins = 0
        for seed in range(5):
            data = tiny_task(seed)
            m = build_model("mlp", [4, 2], seed, r_max=2)
            # random base: supports must adapt it towards the teacher
            res = train_supernet(m, _spaces(m), data, TrainSchedule(epochs=100, batch_size=64, lr=1e-2, seed=seed))
            wins += res.history[99] < res.history[0]
        assert wins >= 3

    def test_pretrain_reaches_noise(self):
        data = tiny_task(0, n=400)
        m = build_model("mlp", [4, 2], 0)
        res = pretrain(m, data, TrainSchedule(epochs=150, batch_size=32, lr=3e-2))
        assert evaluate(res.model, data, "val")["loss"] < 1e-3

    def test_feature_mismatch(self):
        m = build_model("mlp", [3, 2], 0)
        with pytest.raises(ContractError):
            train_supernet(m, _spaces(m), tiny_task(d=4), TrainSchedule(epochs=1))

    def test_rank_overflow(self):
        m = build_model("mlp", [4, 2], 0, r_max=2)
        with pytest.raises(ConfigurationError):
            train_supernet(m, _spaces(m, (4,)), tiny_task(), TrainSchedule(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        data = tiny_task()
        data.features[:, 0] = 1e300
        m = build_model("mlp", [4, 2], 0)
        with pytest.raises(DivergenceError) as info:
            pretrain(m, data, TrainSchedule(epochs=1))
        assert info.value.iteration == 0

    def test_classification_training(self):
        data, _ = gen_pretrain_task(4, 2, 400, 0, task="classification", n_classes=3)
        m = build_model("mini-attention", [2, 3], 0, tokens=2, r_max=2)
        before = evaluate(m, data, "val")["loss"]
        res = train_supernet(m, _spaces(m), data, TrainSchedule(epochs=20, batch_size=32, lr=1e-2))
        cfg = [LayerConfig(lora(2), lora(2)) for _ in m.layers]
        assert evaluate(res.model, data, "val", cfg)["loss"] < before
