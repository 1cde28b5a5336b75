import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from armsight.losses import combined_loss
from armsight.model import ModelConfig, build_model, check_model_gradients, layer_specs, toy_config
from armsight.nn import ShapeError


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(), seed=0)


def random_images(rng, n, W=64, H=53):
    return rng.uniform(0, 1, (n, 3, H, W)).astype(np.float32)


class TestBuild:
    def test_default_shapes_and_size(self, model):
        assert model.parameter_count < 5_000_000
        _, shapes = layer_specs(ModelConfig())
        assert shapes["mask"] == (1, 53, 64)
        assert shapes["skip"] == (16, 13, 16)

    def test_output_shapes(self, model, rng):
        out = model.forward(random_images(rng, 2))
        assert out.mask_prob.shape == (2, 53, 64)
        assert out.joints.shape == (2, 18) and out.base.shape == (2, 3)
        assert out.type_prob.shape == (2, 3)

    def test_same_seed_same_params(self):
        a, b = build_model(toy_config(), 3), build_model(toy_config(), 3)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    @pytest.mark.parametrize("kw,match", [
        (dict(mask_dilations=(1, 2, 4)), "at least 4"),
        (dict(skip_tap=3), "tap"),
        (dict(kernel=2), "odd"),
        (dict(skip_fc=64), "equal width"),
    ])
    def test_invalid_config_named(self, kw, match):
        with pytest.raises((ValueError, ShapeError), match=match):
            build_model(ModelConfig(**kw))

    def test_resolution_mismatch(self, model):
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 3, 32, 32), np.float32))

    def test_config_json_round_trip(self, tmp_path):
        cfg = toy_config((20, 17))
        cfg.save(tmp_path / "c.json")
        assert ModelConfig.load(tmp_path / "c.json") == cfg


class TestForward:
    def test_output_ranges(self, model, rng):
        out = model.predict(random_images(rng, 100))
        assert ((out.mask_prob > 0) & (out.mask_prob < 1)).all()
        assert np.abs(out.type_prob.sum(1) - 1).max() < 1e-6
        assert np.isfinite(out.joints).all() and np.isfinite(out.base).all()

    def test_identical_rows(self, model, rng):
        x = np.repeat(random_images(rng, 1), 2, axis=0)
        out = model.forward(x)
        for f in ("mask_prob", "joints", "base", "type_prob"):
            assert np.array_equal(getattr(out, f)[0], getattr(out, f)[1])

    @settings(max_examples=5, deadline=None)
    @given(st.permutations(range(4)))
    def test_batch_permutation(self, perm):
        m = build_model(toy_config(), 1)
        x = np.random.default_rng(0).uniform(size=(4, 3, 13, 16))
        a, b = m.forward(x), m.forward(x[list(perm)])
        for f in ("mask_prob", "joints", "base", "type_prob"):
            assert np.allclose(getattr(a, f)[list(perm)], getattr(b, f), rtol=1e-5, atol=1e-6)

    def test_single_image_under_100ms(self, model, rng):
        x = random_images(rng, 1)
        model.forward_timed(x)
        elapsed = min(model.forward_timed(x)[1] for _ in range(3))
        assert 0 < elapsed < 0.1


class TestGradients:
    def test_every_block_receives_gradient(self, rng):
        m = build_model(ModelConfig(), seed=0)
        x = random_images(rng, 1)
        masks = np.clip((rng.uniform(size=(1, 53, 64)) < 0.1).astype(float), 1e-7, 1 - 1e-7)
        labels = {"masks": masks, "joints": rng.normal(size=(1, 18)),
                  "bases": rng.normal(size=(1, 3)), "types": np.eye(3)[[1]]}
        _, g = combined_loss(m.forward(x).as_dict(), labels)
        grads = m.backward(g)
        assert set(grads) == set(m.params)
        for name, arr in grads.items():
            if name.endswith(".w"):
                assert np.abs(arr).max() > 0, name

    def test_skip_path_carries_gradient_to_mask_branch(self, rng):
        # only coordinate losses: mask conv 1-4 can only be reached through the skip path
        m = build_model(toy_config(), seed=2, dtype=np.float64)
        x = rng.uniform(size=(2, 3, 13, 16))
        out = m.forward(x)
        g = {"mask_prob": np.zeros_like(out.mask_prob), "joints": np.ones((2, 18)),
             "base": np.zeros((2, 3)), "type_prob": np.zeros((2, 3))}
        grads = m.backward(g)
        assert np.abs(grads["mask.conv4.w"]).max() > 0
        assert not grads["mask.out.w"].any()

    def test_full_network_finite_differences(self):
        report = check_model_gradients(seed=0)
        assert report.passed and report.max_error < 1e-4, report.worst_block()

    def test_literal_mask_form_finite_differences(self):
        assert check_model_gradients(seed=1, literal=True).passed
