import numpy as np
import pytest

from dragplan.mlp import (
    MlpModel,
    TrainConfig,
    backward,
    forward,
    load_checkpoint,
    output_and_input_gradient,
    predict_label,
    save_checkpoint,
    train,
    transform_label,
)
from dragplan.rollout import DatasetRecord


def small_model(rng, input_dim=9, hidden=(8, 7, 5), seed=1):
    model = MlpModel.init_random(input_dim, hidden=hidden, seed=seed)
    model.input_mean = rng.normal(size=input_dim)
    model.input_std = np.abs(rng.normal(size=input_dim)) + 0.5
    return model


def linear_latent_records(rng, n):
    """Labels that are an exact linear function of the (rank-1) inputs."""
    u = rng.normal(size=96)
    w_d = rng.normal(size=3)
    records = []
    for i in range(n):
        t = rng.normal()
        c = t * u
        d = np.full(3, 1.0) + 0.3 * t * w_d
        records.append(DatasetRecord(c, d, float(2.0 * t + 3.0), False, i))
    return records


class TestForward:
    def test_dead_network_outputs_bias(self):
        model = MlpModel.init_random(4, hidden=(3,), seed=0)
        for w in model.weights:
            w[:] = 0.0
        model.biases[-1][:] = 1.75
        assert forward(model, np.zeros(4)) == pytest.approx(1.75)

    def test_mean_input_hits_first_layer_bias(self, rng):
        model = small_model(rng)
        pre = (model.input_mean - model.input_mean) / model.input_std @ model.weights[0] \
            + model.biases[0]
        np.testing.assert_allclose(pre, model.biases[0])

    def test_matches_naive_triple_loop_oracle(self, rng):
        model = small_model(rng)
        x = rng.normal(size=9)
        z = [(x[j] - model.input_mean[j]) / model.input_std[j] for j in range(9)]
        for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
            out = []
            for k in range(w.shape[1]):
                acc = b[k]
                for j in range(len(z)):
                    acc += z[j] * w[j, k]
                if layer < len(model.weights) - 1:
                    acc = max(acc, 0.0)
                out.append(acc)
            z = out
        assert forward(model, x) == pytest.approx(z[0], rel=1e-12, abs=1e-12)

    def test_dimension_mismatch_raises(self, rng):
        model = small_model(rng)
        with pytest.raises(ValueError):
            forward(model, np.zeros(10))

    def test_label_space_prediction_inverts_transform(self, rng):
        model = small_model(rng)
        x = rng.normal(size=9)
        assert predict_label(model, x) == pytest.approx(np.expm1(forward(model, x)))


class TestBackward:
    def test_zero_error_batch_gives_zero_gradients(self, rng):
        model = small_model(rng)
        x = rng.normal(size=(3, 9))
        targets = np.array([forward(model, xi) for xi in x])
        loss, gw, gb, gx = backward(model, x, targets)
        assert loss == pytest.approx(0.0, abs=1e-24)
        for g in (*gw, *gb):
            np.testing.assert_allclose(g, 0.0, atol=1e-12)
        np.testing.assert_allclose(gx, 0.0, atol=1e-12)

    def test_gradients_match_central_differences(self, rng):
        model = small_model(rng)
        x = rng.normal(size=(4, 9))
        y = rng.normal(size=4)
        loss, gw, gb, gx = backward(model, x, y)
        h = 1e-5
        worst = 0.0
        for li, w in enumerate(model.weights):
            for idx in [(0, 0), (w.shape[0] - 1, w.shape[1] - 1), (0, w.shape[1] - 1)]:
                keep = w[idx]
                w[idx] = keep + h
                up = backward(model, x, y)[0]
                w[idx] = keep - h
                dn = backward(model, x, y)[0]
                w[idx] = keep
                fd = (up - dn) / (2 * h)
                worst = max(worst, abs(fd - gw[li][idx]) / max(1e-8, abs(fd)))
        for li, b in enumerate(model.biases):
            keep = b[0]
            b[0] = keep + h
            up = backward(model, x, y)[0]
            b[0] = keep - h
            dn = backward(model, x, y)[0]
            b[0] = keep
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - gb[li][0]) / max(1e-8, abs(fd)))
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                xp = x.copy()
                xp[i, j] += h
                xm = x.copy()
                xm[i, j] -= h
                fd = (backward(model, xp, y)[0] - backward(model, xm, y)[0]) / (2 * h)
                worst = max(worst, abs(fd - gx[i, j]) / max(1e-8, abs(fd)))
        assert worst <= 1e-4

    def test_input_gradient_of_single_output(self, rng):
        model = small_model(rng)
        x = rng.normal(size=9)
        _, grad = output_and_input_gradient(model, x)
        h = 1e-6
        fd = np.zeros(9)
        for j in range(9):
            xp = x.copy()
            xp[j] += h
            xm = x.copy()
            xm[j] -= h
            fd[j] = (forward(model, xp) - forward(model, xm)) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-10)

    def test_nonfinite_loss_aborts(self, rng):
        model = small_model(rng)
        with pytest.raises(FloatingPointError):
            backward(model, np.full((2, 9), 1e200), np.zeros(2))


class TestTrain:
    def test_requires_minimum_dataset(self, rng):
        with pytest.raises(ValueError):
            train(linear_latent_records(rng, 50), TrainConfig(epochs=1))

    def test_learns_exact_linear_function(self, rng):
        records = linear_latent_records(rng, 4000)
        model, history = train(records, TrainConfig(
            epochs=200, seed=3, label_transform="identity"))
        labels = np.array([r.label for r in records])
        best_val = min(h[2] for h in history)
        assert best_val < 1e-3 * labels.var()

    def test_deterministic_per_seed(self, rng):
        records = linear_latent_records(rng, 200)
        cfg = TrainConfig(epochs=5, seed=9, label_transform="identity")
        m1, h1 = train(records, cfg)
        m2, h2 = train(records, cfg)
        assert h1 == h2
        for a, b in zip(m1.weights, m2.weights):
            assert np.array_equal(a, b)
        for a, b in zip(m1.biases, m2.biases):
            assert np.array_equal(a, b)

    def test_normalization_invariance_to_input_shift(self, rng):
        records = linear_latent_records(rng, 300)
        shifted = [DatasetRecord(r.coefficients + 5.0, r.durations, r.label,
                                 r.crashed, r.seed) for r in records]
        cfg = TrainConfig(epochs=10, seed=4, label_transform="identity")
        _, h1 = train(records, cfg)
        _, h2 = train(shifted, cfg)
        for (e1, t1, v1), (e2, t2, v2) in zip(h1, h2):
            assert t1 == pytest.approx(t2, rel=1e-8)
            assert v1 == pytest.approx(v2, rel=1e-8)

    def test_smoothed_loss_nonincreasing_on_linear_data(self, rng):
        records = linear_latent_records(rng, 1000)
        _, history = train(records, TrainConfig(
            epochs=60, seed=2, label_transform="identity"))
        losses = np.array([h[1] for h in history])
        window = 10
        smoothed = np.convolve(losses, np.ones(window) / window, mode="valid")
        assert np.all(np.diff(smoothed) <= 1e-9)

    def test_log_transform_default_and_snap_weight_recorded(self, rng):
        records = linear_latent_records(rng, 150)
        # make labels positive for the log transform
        records = [DatasetRecord(r.coefficients, r.durations, abs(r.label) + 0.1,
                                 r.crashed, r.seed) for r in records]
        model, _ = train(records, TrainConfig(epochs=2, seed=0))
        assert model.label_transform == "log1p"
        assert model.snap_weight > 0.0
        assert model.val_mse > 0.0

    def test_hyperparameter_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.epochs) \
            == (256, 1e-3, 0.9, 1000)
        assert cfg.split == 0.8


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, rng, tmp_path):
        model = small_model(rng)
        model.snap_weight = 3.14e-7
        model.val_mse = 0.123
        path = tmp_path / "ckpt.json"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        for a, b in zip(model.weights, back.weights):
            assert np.array_equal(a, b)
        for a, b in zip(model.biases, back.biases):
            assert np.array_equal(a, b)
        assert np.array_equal(model.input_mean, back.input_mean)
        assert np.array_equal(model.input_std, back.input_std)
        assert back.snap_weight == model.snap_weight
        assert back.val_mse == model.val_mse
        assert back.label_transform == model.label_transform
        # byte-identical on re-save
        path2 = tmp_path / "ckpt2.json"
        save_checkpoint(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_bad_schema(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": "other"}')
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestTransforms:
    def test_log1p_roundtrip(self):
        y = np.array([0.0, 0.5, 100.0, 1e4])
        t = transform_label(y, "log1p")
        np.testing.assert_allclose(np.expm1(t), y, rtol=1e-12)

    def test_identity(self):
        y = np.array([-1.0, 2.0])
        assert np.array_equal(transform_label(y, "identity"), y)


class TestModelValidation:
    def test_rejects_mismatched_layers(self):
        with pytest.raises(ValueError):
            MlpModel([np.zeros((4, 3))], [np.zeros(2)], np.zeros(4), np.ones(4))

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ValueError):
            MlpModel([np.zeros((2, 1))], [np.zeros(1)], np.zeros(2), [1.0, 0.0])

    def test_layer_sizes_property(self):
        model = MlpModel.init_random(99, seed=0)
        assert model.layer_sizes == (99, 100, 100, 20, 1)
