import numpy as np
import pytest

from gridflow import nn
from gridflow.surrogate import (ShapeError, TrainConfig, build_cnn, build_mlp,
                                build_rbfnet, default_cnn_reshape, evaluate,
                                mean_baseline_mse, model_from_dict,
                                model_to_dict, train)


class TestBuilders:
    def test_mlp_layer_stack(self):
        model = build_mlp(48, 51, seed=1)
        dense = [l for l in model.net.layers if isinstance(l, nn.Dense)]
        assert [d.n_out for d in dense] == [512, 256, 128, 64, 51]
        assert dense[0].n_in == 48
        # final layer starts at zero so the first prediction is the origin
        assert (dense[-1].w == 0).all() and (dense[-1].b == 0).all()
        assert model.net.predict(np.random.default_rng(0)
                                 .random((3, 48))).sum() == 0

    def test_default_reshape_smallest_odd_square(self):
        assert default_cnn_reshape(48) == (7, 7)
        assert default_cnn_reshape(49) == (7, 7)
        assert default_cnn_reshape(50) == (9, 9)
        assert default_cnn_reshape(182) == (15, 15)
        assert default_cnn_reshape(4) == (3, 3)

    def test_cnn_stack_on_default_reshape(self):
        model = build_cnn(48, 51, seed=1)
        kinds = [type(l).__name__ for l in model.net.layers]
        # 7x7 -> conv 2x2 -> 6x6 -> pool -> 3x3 -> conv 2x2 -> 2x2 (too small
        # to pool again) -> flatten 64*4
        assert kinds.count("Conv2D") == 2 and kinds.count("Pool2D") == 1
        flat_in = next(l for l in model.net.layers
                       if isinstance(l, nn.Dense)).n_in
        assert flat_in == 64 * 2 * 2
        out = model.net.predict(np.zeros((2, 48)))
        assert out.shape == (2, 51)

    def test_rectangular_reshape_with_odd_pool_raises(self):
        # a 7x6 map convolves to 6x5, which a 2x2 pool cannot tile
        with pytest.raises(ShapeError) as err:
            build_cnn(42, 54, reshape=(7, 6), seed=1)
        assert "pool layer 1" in str(err.value)

    def test_reshape_too_small_raises(self):
        with pytest.raises(ShapeError):
            build_cnn(50, 10, reshape=(7, 7))

    def test_kernel_exceeding_map_raises(self):
        with pytest.raises(ShapeError) as err:
            build_cnn(9, 4, reshape=(3, 3), convs=((8, 2, 2), (16, 4, 4)))
        assert "conv layer 2" in str(err.value)

    def test_rbfnet_k_centers(self, tiny_dataset):
        xt = tiny_dataset.x_norm.apply(tiny_dataset.x[tiny_dataset.train_idx])
        model = build_rbfnet(xt, 10, len(tiny_dataset.y_slots), seed=1)
        rbf = model.net.layers[0]
        assert rbf.centers.shape == (10, xt.shape[1])
        assert (rbf.sigmas > 0).all()
        assert model.net.layers[1].n_out == len(tiny_dataset.y_slots)

    def test_rbfnet_k_exceeding_samples_rejected(self):
        with pytest.raises(ValueError):
            build_rbfnet(np.zeros((5, 3)), 10, 2)


class TestTraining:
    def test_loss_decreases(self, tiny_dataset):
        model = build_mlp(len(tiny_dataset.x_slots), len(tiny_dataset.y_slots),
                          hidden=(32, 16), seed=2)
        history = train(model, tiny_dataset, TrainConfig(lr=1e-3, epochs=30,
                                                         seed=2))
        assert history[-1] < history[0]
        assert len(history) == 30

    def test_bitwise_determinism(self, tiny_dataset):
        cfg = TrainConfig(epochs=3, seed=7)
        runs = []
        for _ in range(2):
            model = build_mlp(len(tiny_dataset.x_slots),
                              len(tiny_dataset.y_slots), hidden=(16,), seed=7)
            history = train(model, tiny_dataset, cfg)
            runs.append((history, model.net.layers[0].w.copy()))
        assert runs[0][0] == runs[1][0]
        assert (runs[0][1] == runs[1][1]).all()

    def test_training_binds_normalizers(self, tiny_dataset):
        model = build_mlp(len(tiny_dataset.x_slots), len(tiny_dataset.y_slots),
                          hidden=(8,), seed=1)
        assert model.x_norm is None
        train(model, tiny_dataset, TrainConfig(epochs=1, seed=1))
        assert model.x_norm is tiny_dataset.x_norm
        pred = model.predict(tiny_dataset.x[:4])
        assert pred.shape == (4, len(tiny_dataset.y_slots))

    def test_dropout_variant_trains_and_evals_deterministically(
            self, tiny_dataset):
        model = build_mlp(len(tiny_dataset.x_slots), len(tiny_dataset.y_slots),
                          hidden=(32, 16), dropout=0.2, seed=3)
        train(model, tiny_dataset, TrainConfig(lr=1e-3, epochs=5, seed=3))
        xn = tiny_dataset.x_norm.apply(tiny_dataset.x[:6])
        a = model.predict_normalized(xn)
        b = model.predict_normalized(xn)
        assert (a == b).all()


class TestEvaluate:
    def test_perfect_echo_model_scores_zero(self, tiny_dataset):
        class Echo:
            def predict_normalized(self, xn):
                _, yn = tiny_dataset.normalized(tiny_dataset.test_idx)
                return yn

        report = evaluate(Echo(), tiny_dataset, "test")
        assert report.mse_pct == 0.0 and report.mae_pct == 0.0
        # denormalized errors only carry float round-off
        assert all(v < 1e-9 for v in report.worst_abs.values())

    def test_groups_cover_all_slots(self, tiny_dataset):
        model = build_mlp(len(tiny_dataset.x_slots), len(tiny_dataset.y_slots),
                          hidden=(8,), seed=1)
        train(model, tiny_dataset, TrainConfig(epochs=1, seed=1))
        report = evaluate(model, tiny_dataset, "test")
        assert set(report.groups) == {"V", "I", "thV", "thI", "loss"}
        assert sum(r["slots"] for r in report.groups.values()) == \
            len(tiny_dataset.y_slots)

    def test_zero_model_matches_mean_baseline_scale(self, tiny_dataset):
        # predicting all zeros cannot beat predicting the train mean by much
        class Zero:
            def predict_normalized(self, xn):
                return np.zeros((len(xn), len(tiny_dataset.y_slots)))

        report = evaluate(Zero(), tiny_dataset, "test")
        baseline = mean_baseline_mse(tiny_dataset, "test") * 100.0
        assert report.mse_pct >= baseline * 0.9

    def test_csv_export(self, tiny_dataset, tmp_path):
        model = build_mlp(len(tiny_dataset.x_slots), len(tiny_dataset.y_slots),
                          hidden=(8,), seed=1)
        train(model, tiny_dataset, TrainConfig(epochs=1, seed=1))
        report = evaluate(model, tiny_dataset, "test")
        path = tmp_path / "r.csv"
        report.to_csv(path)
        text = path.read_text()
        assert "overall" in text and "mse_pct" in text


class TestModelDictRoundTrip:
    @pytest.mark.parametrize("family", ["mlp", "cnn", "rbf"])
    def test_families_roundtrip_bitwise(self, family, tiny_dataset):
        dx, dy = len(tiny_dataset.x_slots), len(tiny_dataset.y_slots)
        if family == "mlp":
            model = build_mlp(dx, dy, hidden=(16,), seed=4)
        elif family == "cnn":
            model = build_cnn(dx, dy, fcs=(16,), seed=4)
        else:
            xt = tiny_dataset.x_norm.apply(
                tiny_dataset.x[tiny_dataset.train_idx])
            model = build_rbfnet(xt, 8, dy, seed=4)
        train(model, tiny_dataset, TrainConfig(epochs=1, batch=16, seed=4))
        clone = model_from_dict(model_to_dict(model))
        xn = tiny_dataset.x_norm.apply(tiny_dataset.x[:5])
        assert (model.predict_normalized(xn)
                == clone.predict_normalized(xn)).all()
