import numpy as np
import pytest

from armsight.checkpoint import CheckpointError, load_params, save_params
from armsight.model import Model, build_model, toy_config


def test_model_round_trip_bit_exact(tmp_path):
    m = build_model(toy_config(), seed=4)
    save_params(tmp_path / "m.rpnn", m.params)
    back = load_params(tmp_path / "m.rpnn")
    assert list(back) == list(m.params)
    for k, v in m.params.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    x = np.random.default_rng(0).uniform(size=(2, 3, 13, 16))
    a, b = m.forward(x), Model(m.config, back).forward(x)
    assert np.array_equal(a.joints, b.joints) and np.array_equal(a.mask_prob, b.mask_prob)


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64])
def test_dtypes_and_special_values(tmp_path, dtype):
    arr = np.array([[0, 1], [-3, 7]], dtype=dtype)
    if dtype != np.int64:
        arr = arr.astype(dtype)
        arr[0, 0] = np.finfo(dtype).tiny
    save_params(tmp_path / "a.rpnn", {"x": arr, "scalar": np.array(2.5)})
    back = load_params(tmp_path / "a.rpnn")
    assert np.array_equal(back["x"], arr) and back["x"].dtype == arr.dtype
    assert back["scalar"].shape == ()


def test_bad_magic(tmp_path):
    (tmp_path / "x.rpnn").write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="not an RPNN"):
        load_params(tmp_path / "x.rpnn")


def test_truncated(tmp_path):
    save_params(tmp_path / "m.rpnn", build_model(toy_config(), 0).params)
    data = (tmp_path / "m.rpnn").read_bytes()
    (tmp_path / "t.rpnn").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "t.rpnn")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        save_params(tmp_path / "u.rpnn", {"x": np.zeros(2, np.int8)})


def test_wrong_blocks_rejected():
    m = build_model(toy_config(), 0)
    params = dict(m.params)
    params.pop("head.type.b")
    with pytest.raises(ValueError, match="do not match"):
        Model(m.config, params)
