import numpy as np
import pytest

from posefuse import imageops, toygan
from posefuse.errors import DimMismatch, DivergenceDetected, StaleCache
from _oracles import fast_probe_grads, max_relative_error, naive_probe_grads


def small_net(rng, dims=(6, 5, 4), acts=("tanh", "sigmoid")):
    return toygan.init_net(list(dims), list(acts), rng, scale=0.1)


class TestForward:
    def test_identity_layer_passes_input_through(self):
        net = toygan.TinyNet([toygan.Layer(np.eye(4), np.zeros(4), "identity")])
        x = np.array([1.0, -2.0, 3.0, 0.5])
        out, _ = toygan.forward(net, x)
        np.testing.assert_array_equal(out, x)

    def test_zero_weights_tanh_outputs_zero(self):
        net = toygan.TinyNet([toygan.Layer(np.zeros((3, 5)), np.zeros(3), "tanh")])
        out, _ = toygan.forward(net, np.ones(5))
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_matches_straight_line_evaluation(self):
        rng = np.random.default_rng(0)
        net = small_net(rng)
        x = rng.standard_normal(6)
        out, _ = toygan.forward(net, x)
        z1 = net.layers[0].weights @ x + net.layers[0].bias
        a1 = np.tanh(z1)
        z2 = net.layers[1].weights @ a1 + net.layers[1].bias
        expected = 1.0 / (1.0 + np.exp(-z2))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(1)
        net = small_net(rng)
        with pytest.raises(DimMismatch):
            toygan.forward(net, np.zeros(7))

    def test_batch_rows_independent(self):
        rng = np.random.default_rng(2)
        net = small_net(rng)
        xs = rng.standard_normal((4, 6))
        batch_out, _ = toygan.forward(net, xs)
        for i in range(4):
            single, _ = toygan.forward(net, xs[i])
            np.testing.assert_allclose(batch_out[i], single, atol=1e-12)


class TestBackward:
    def test_linear_regression_closed_form(self):
        """Single identity layer with squared error: grad = 2 (Wx - t) x^T."""
        rng = np.random.default_rng(3)
        weights = rng.standard_normal((3, 4))
        net = toygan.TinyNet([toygan.Layer(weights.copy(), np.zeros(3), "identity")])
        x = rng.standard_normal(4)
        target = rng.standard_normal(3)
        out, cache = toygan.forward(net, x)
        loss_grad = 2.0 * (out - target)
        grads, _ = toygan.backward(net, cache, loss_grad)
        grad_w, grad_b = grads[0]
        np.testing.assert_allclose(grad_w, np.outer(2.0 * (weights @ x - target), x),
                                   atol=1e-12)
        np.testing.assert_allclose(grad_b, 2.0 * (weights @ x - target), atol=1e-12)

    def test_matches_finite_differences_on_small_net(self):
        rng = np.random.default_rng(4)
        net = small_net(rng)
        x = rng.standard_normal(6)
        g = rng.standard_normal(4)
        _, cache = toygan.forward(net, x)
        analytic, _ = toygan.backward(net, cache, g)
        numeric = naive_probe_grads(net, x, g)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_zero_loss_grad_zero_param_grads(self):
        rng = np.random.default_rng(5)
        net = small_net(rng)
        _, cache = toygan.forward(net, rng.standard_normal(6))
        grads, dx = toygan.backward(net, cache, np.zeros(4))
        for dw, db in grads:
            assert np.all(dw == 0.0) and np.all(db == 0.0)
        assert np.all(dx == 0.0)

    def test_stale_cache_rejected(self):
        rng = np.random.default_rng(6)
        net = small_net(rng)
        _, cache = toygan.forward(net, rng.standard_normal(6))
        net.layers[0].weights = net.layers[0].weights.copy()
        with pytest.raises(StaleCache):
            toygan.backward(net, cache, np.zeros(4))

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        net = small_net(rng)
        x = rng.standard_normal(6)
        g = rng.standard_normal(4)
        _, cache = toygan.forward(net, x)
        _, dx = toygan.backward(net, cache, g)
        h = 1e-6
        for j in range(6):
            bumped = x.copy()
            bumped[j] += h
            hi, _ = toygan.forward(net, bumped)
            bumped[j] -= 2 * h
            lo, _ = toygan.forward(net, bumped)
            fd = (float(hi @ g) - float(lo @ g)) / (2 * h)
            assert abs(fd - dx[j]) < 1e-5


class TestFastProbeOracle:
    def test_fast_probe_matches_naive_probe(self):
        """The batched finite-difference oracle must agree with the naive
        per-parameter one essentially to roundoff."""
        rng = np.random.default_rng(8)
        for acts in (("tanh", "sigmoid"), ("sigmoid", "identity"), ("tanh", "tanh")):
            net = small_net(rng, dims=(7, 6, 3), acts=acts)
            x = rng.standard_normal(7)
            g = rng.standard_normal(3)
            naive = naive_probe_grads(net, x, g)
            fast = fast_probe_grads(net, x, g)
            for (nw, nb), (fw, fb) in zip(naive, fast):
                np.testing.assert_allclose(fw, nw, atol=1e-9)
                np.testing.assert_allclose(fb, nb, atol=1e-9)


class TestSoftColorKl:
    def test_histogram_sums_to_one(self):
        rng = np.random.default_rng(9)
        hist, _ = toygan._soft_histogram(rng.uniform(0, 1, 100), 8)
        assert abs(hist.sum() - 1.0) <= 1e-12
        assert (hist > 0.0).all()

    def test_zero_for_identical_inputs(self):
        rng = np.random.default_rng(10)
        values = rng.uniform(0, 1, 48)
        kl, grad = toygan.soft_color_kl(values, values.copy(), channels=3, bins=8)
        assert abs(kl) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        gen = rng.uniform(0.1, 0.9, 48)
        ref = rng.uniform(0.1, 0.9, 48)
        kl, grad = toygan.soft_color_kl(gen, ref, channels=3, bins=8)
        h = 1e-6
        for idx in rng.integers(0, 48, 12):
            bumped = gen.copy()
            bumped[idx] += h
            hi, _ = toygan.soft_color_kl(bumped, ref, channels=3, bins=8)
            bumped[idx] -= 2 * h
            lo, _ = toygan.soft_color_kl(bumped, ref, channels=3, bins=8)
            fd = (hi - lo) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-6 * max(1.0, abs(fd))


class TestProceduralSamples:
    def test_same_seed_identical_bytes(self):
        a = toygan.gen_procedural_sample(123, 16)
        b = toygan.gen_procedural_sample(123, 16)
        for left, right in zip(a, b):
            assert left.data.tobytes() == right.data.tobytes()

    def test_different_seeds_differ(self):
        a = toygan.gen_procedural_sample(1, 16)
        b = toygan.gen_procedural_sample(2, 16)
        assert a.image.data.tobytes() != b.image.data.tobytes()

    def test_edge_map_zero_away_from_boundary(self):
        sample = toygan.gen_procedural_sample(5, 32)
        mask = sample.mask.data[:, :, 0]
        edges = sample.shape_map.data[:, :, 0]
        from scipy import ndimage
        near = ndimage.binary_dilation(ndimage.sobel(mask, 0) ** 2
                                       + ndimage.sobel(mask, 1) ** 2 > 0, iterations=1)
        assert np.all(edges[~near] == 0.0)

    def test_color_map_is_blur_of_image(self):
        sample = toygan.gen_procedural_sample(9, 16)
        expected = imageops.blur_average(sample.image, 2)
        np.testing.assert_array_equal(sample.color_map.data, expected.data)

    def test_mask_binary(self):
        sample = toygan.gen_procedural_sample(11, 16)
        values = np.unique(sample.mask.data)
        assert set(values.tolist()) <= {0.0, 1.0}
        assert sample.mask.data.sum() > 0

    def test_side_lower_bound(self):
        with pytest.raises(ValueError):
            toygan.gen_procedural_sample(0, 4)


class TestTraining:
    def test_zero_weights_zero_ta(self):
        cfg = toygan.ToyConfig(seed=1, steps=3, batch=2, holdout=2,
                               weights=toygan.LossWeights(0.0, 0.0))
        report = toygan.train_toy_gan(cfg)
        assert all(r.ta == 0.0 for r in report.records)

    def test_ta_bookkeeping(self):
        cfg = toygan.ToyConfig(seed=2, steps=5, batch=2, holdout=2)
        report = toygan.train_toy_gan(cfg)
        for record in report.records:
            expected = (cfg.weights.lambda1 * record.color
                        + cfg.weights.lambda2 * record.shape)
            assert abs(record.ta - expected) <= 1e-9

    def test_byte_identical_reports(self):
        cfg = toygan.ToyConfig(seed=3, steps=4, batch=2, holdout=2)
        a = toygan.train_toy_gan(cfg)
        b = toygan.train_toy_gan(cfg)
        assert a.to_json() == b.to_json()

    def test_zero_steps(self):
        cfg = toygan.ToyConfig(seed=4, steps=0, batch=2, holdout=2)
        report = toygan.train_toy_gan(cfg)
        assert report.records == ()
        assert report.initial_holdout_ta == report.final_holdout_ta

    def test_record_count_equals_steps(self):
        cfg = toygan.ToyConfig(seed=5, steps=7, batch=2, holdout=2)
        assert len(toygan.train_toy_gan(cfg).records) == 7

    def test_fixed_batch_overfits(self):
        """Frozen discriminator, one fixed batch: the training combined loss
        collapses well below half its starting value."""
        cfg = toygan.ToyConfig(seed=6, steps=120, freeze_discriminator=True,
                               fixed_batch=True, batch=4, holdout=2)
        report = toygan.train_toy_gan(cfg)
        assert report.records[-1].ta <= 0.5 * report.records[0].ta

    def test_divergence_aborts_with_partial_report(self, monkeypatch):
        calls = {"n": 0}
        original = toygan._hard_color

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] > 4:
                return float("nan")
            return original(*args, **kwargs)

        monkeypatch.setattr(toygan, "_hard_color", poisoned)
        cfg = toygan.ToyConfig(seed=7, steps=10, batch=2, holdout=2)
        with pytest.raises(DivergenceDetected) as err:
            toygan.train_toy_gan(cfg)
        assert err.value.report is not None
        assert 0 < len(err.value.report.records) < 10

    def test_seed_mandatory_and_validated(self):
        with pytest.raises(ValueError):
            toygan.ToyConfig(seed=-1)
        with pytest.raises(TypeError):
            toygan.ToyConfig()

    def test_png_dumps(self, tmp_path):
        cfg = toygan.ToyConfig(seed=8, steps=5, batch=2, holdout=2,
                               dump_every=2, dump_dir=str(tmp_path / "dumps"))
        toygan.train_toy_gan(cfg)
        names = sorted(p.name for p in (tmp_path / "dumps").iterdir())
        assert names == ["step00000.png", "step00002.png", "step00004.png"]
        dumped = imageops.load_png(tmp_path / "dumps" / "step00000.png")
        assert (dumped.height, dumped.width, dumped.channels) == (16, 16, 3)
