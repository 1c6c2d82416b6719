import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ircsim.dataset import Dataset
from ircsim.model import (BnParams, Layer, TernaryConvModel, dumps_model, load_model, loads_model,
                          pack_ternary, save_model, unpack_ternary)


def models_equal(a, b):
    assert (a.style, a.input_shape, a.meta) == (b.style, b.input_shape, b.meta)
    for la, lb in zip(a.layers, b.layers, strict=True):
        assert (la.kind, la.name, la.stride, la.padding, la.extra_bias) == \
               (lb.kind, lb.name, lb.stride, lb.padding, lb.extra_bias)
        assert np.array_equal(la.weights, lb.weights)
        if la.bn is None:
            assert lb.bn is None
        else:
            for k in ("gamma", "beta", "mean", "var"):
                assert np.array_equal(getattr(la.bn, k), getattr(lb.bn, k))
            assert la.bn.eps == lb.bn.eps
    return True


@given(arrays(np.int8, st.integers(0, 50), elements=st.sampled_from([-1, 0, 1])))
def test_pack_round_trip(w):
    assert np.array_equal(unpack_ternary(pack_ternary(w), w.shape), w)


def test_pack_density():
    assert len(pack_ternary(np.zeros(540, np.int8))) == 135


def test_unpack_rejects_code_three():
    with pytest.raises(ValueError):
        unpack_ternary(bytes([0b11]), (1,))


@pytest.mark.parametrize("style", ["proposed", "baseline"])
def test_model_round_trip(desk, tmp_path, style):
    model = desk[style].with_extra_bias({"irc2": 4})
    save_model(model, tmp_path / "m.ircmodel")
    assert models_equal(load_model(tmp_path / "m.ircmodel"), model)
    assert dumps_model(load_model(tmp_path / "m.ircmodel")) == dumps_model(model)


def test_model_version_and_magic():
    m = TernaryConvModel((Layer("digital_first", np.ones((2, 1, 3, 3)), name="f"),), (1, 4, 4))
    blob = dumps_model(m)
    with pytest.raises(ValueError, match="not an ircsim"):
        loads_model(b"garbage" + blob)
    bumped = blob.replace(b'"version": 1', b'"version": 9')
    with pytest.raises(ValueError, match="version"):
        loads_model(bumped)


def test_model_truncated():
    bn = BnParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
    m = TernaryConvModel((Layer("irc_gconv", np.ones((2, 1, 3, 3)), name="g", bn=bn),), (1, 4, 4), "baseline")
    blob = dumps_model(m)
    with pytest.raises(ValueError):
        loads_model(blob[:-5])


def test_layer_validation():
    with pytest.raises(ValueError):
        Layer("dense", np.ones((1, 1, 1, 1)))
    with pytest.raises(ValueError):
        Layer("irc_gconv", np.full((1, 1, 3, 3), 2))
    with pytest.raises(ValueError):
        Layer("irc_gconv", np.ones((1, 1, 3, 2)))
    with pytest.raises(ValueError):
        Layer("digital_last", np.ones(4))


def test_model_validate(desk):
    desk["proposed"].validate()
    desk["baseline"].validate()
    bad = TernaryConvModel(desk["proposed"].layers[1:], desk["proposed"].input_shape)
    with pytest.raises(ValueError):
        bad.validate()


def test_dataset_round_trip(desk, tmp_path):
    d = desk["calib"]
    d.save(tmp_path / "d.ircdata")
    e = Dataset.load(tmp_path / "d.ircdata")
    assert np.array_equal(d.inputs, e.inputs) and np.array_equal(d.labels, e.labels)
    assert e.n_classes == d.n_classes and len(e) == len(d)


def test_dataset_errors():
    d = Dataset(np.zeros((3, 1, 5, 5)), np.array([0, 1, 2]), 3)
    blob = d.dumps()
    with pytest.raises(ValueError):
        Dataset.loads(blob[:-1])
    with pytest.raises(ValueError):
        Dataset.loads(b"x" + blob)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 2), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 2, 2)), np.array([5]), 2)
    header = json.loads(blob.split(b"\n")[2][: int(blob.split(b"\n")[1])])
    assert header["shape"] == [3, 1, 5, 5]
