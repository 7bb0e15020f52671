import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vaalab import diffmodel as dm
from vaalab.diffmodel import Batch, ModelSpec
from vaalab.errors import LayoutError, NumericError, PreconditionError
from conftest import SPECS, make_batch


def scalar_mlp_loss(spec, params, X, y):
    """Straight-line recomputation of the mean cross-entropy, no numpy algebra."""
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    p = [float(v) for v in params]
    W1 = [p[r * d:(r + 1) * d] for r in range(h)]
    off = h * d
    b1 = p[off:off + h]
    off += h
    W2 = [p[off + r * h: off + (r + 1) * h] for r in range(k)]
    off += k * h
    b2 = p[off:off + k]
    act = math.tanh if spec.activation == "tanh" else (lambda z: z if z > 0 else 0.0)
    total = 0.0
    for x, label in zip(X.tolist(), y.tolist()):
        hid = [act(sum(W1[j][i] * x[i] for i in range(d)) + b1[j]) for j in range(h)]
        z = [sum(W2[c][j] * hid[j] for j in range(h)) + b2[c] for c in range(k)]
        mx = max(z)
        lse = mx + math.log(sum(math.exp(v - mx) for v in z))
        total += lse - z[label]
    return total / len(y)


def test_param_counts_and_layout():
    assert ModelSpec("linear-softmax", 16, 4).num_params == 16 * 4 + 4
    spec = ModelSpec("mlp-1hidden", 3, 2, hidden_dim=5)
    assert spec.num_params == 5 * 3 + 5 + 2 * 5 + 2
    assert spec.layout_id != ModelSpec("mlp-1hidden", 3, 2, hidden_dim=4).layout_id


@pytest.mark.parametrize("bad", [
    dict(kind="linear-softmax", input_dim=3, num_classes=1),
    dict(kind="mlp-1hidden", input_dim=3, num_classes=2, hidden_dim=0),
    dict(kind="cnn", input_dim=3, num_classes=2),
    dict(kind="mlp-1hidden", input_dim=3, num_classes=2, hidden_dim=2, activation="gelu"),
])
def test_spec_rejects_invalid(bad):
    with pytest.raises(ValueError):
        ModelSpec(**bad)


@pytest.mark.parametrize("k", [2, 4])
def test_zero_params_give_log_k(rng, k):
    spec = ModelSpec("linear-softmax", 3, k)
    b = make_batch(rng, 7, 3, k)
    assert dm.forward_loss(spec, dm.init_params(spec, zero=True), b) == pytest.approx(math.log(k), abs=1e-15)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_mlp_loss_matches_scalar_recomputation(rng, act):
    spec = ModelSpec("mlp-1hidden", 4, 3, hidden_dim=5, activation=act)
    params = rng.normal(scale=0.7, size=spec.num_params)
    b = make_batch(rng, 9, 4, 3)
    assert dm.forward_loss(spec, params, b) == pytest.approx(scalar_mlp_loss(spec, params, b.features, b.labels), rel=1e-12)


def test_logistic_gradient_entry():
    spec = ModelSpec("linear-softmax", 1, 2)
    b = Batch(np.array([[1.0]]), np.array([1]), np.array([0]), np.array([True]))
    g = dm.grad(spec, dm.init_params(spec, zero=True), b)
    # layout: W (2x1) then b; class-1 weight is entry 1
    assert g[1] == pytest.approx(-0.5, abs=1e-15)
    assert np.allclose(dm.finite_diff_grad(spec, dm.init_params(spec, zero=True), b), g, atol=1e-9)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.layout_id)
def test_gradient_matches_finite_differences(rng, spec):
    for _ in range(5):
        params = rng.normal(scale=0.5, size=spec.num_params)
        b = make_batch(rng, 6, spec.input_dim, spec.num_classes)
        g = dm.grad(spec, params, b)
        fd = dm.finite_diff_grad(spec, params, b)
        rel = np.abs(g - fd) / (np.abs(g) + np.abs(fd) + 1e-8)
        assert rel.max() < 1e-5


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.layout_id)
def test_batch_gradient_is_mean_of_example_gradients(rng, spec):
    params = rng.normal(size=spec.num_params)
    b = make_batch(rng, 5, spec.input_dim, spec.num_classes)
    per = np.mean([dm.grad(spec, params, b.take([i])) for i in range(5)], axis=0)
    assert np.allclose(dm.grad(spec, params, b), per, atol=1e-14)


def test_duplicated_batch_same_gradient(rng):
    spec = SPECS[1]
    params = rng.normal(size=spec.num_params)
    b = make_batch(rng, 4, spec.input_dim, spec.num_classes)
    dup = b.take(np.repeat(np.arange(4), 2))
    assert np.allclose(dm.grad(spec, params, b), dm.grad(spec, params, dup), atol=1e-15)


def test_predict_ties_and_shift_invariance(rng):
    spec = ModelSpec("linear-softmax", 3, 4)
    assert dm.predict(spec, dm.init_params(spec, zero=True), np.ones(3)) == 0
    params = rng.normal(size=spec.num_params)
    shifted = params.copy()
    shifted[-4:] += 3.7
    X = rng.standard_normal((50, 3))
    assert np.array_equal(dm.predict_many(spec, params, X), dm.predict_many(spec, shifted, X))


def test_trained_model_separates_pair():
    spec = ModelSpec("linear-softmax", 2, 2)
    b = Batch(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]), np.array([0, 1]), np.array([True, True]))
    p = dm.init_params(spec, seed=3)
    for _ in range(200):
        p -= 0.5 * dm.grad(spec, p, b)
    assert dm.predict(spec, p, b.features[0]) == 0 and dm.predict(spec, p, b.features[1]) == 1


def test_central_difference_quadratic():
    assert dm.central_difference(lambda t: float(t[0] ** 2), np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-6)
    with pytest.raises(PreconditionError):
        dm.central_difference(lambda t: 0.0, np.array([1.0]), h=0.0)


def test_layout_and_numeric_errors(rng):
    spec = ModelSpec("linear-softmax", 3, 2)
    b = make_batch(rng, 3, 3, 2)
    with pytest.raises(LayoutError):
        dm.forward_loss(spec, np.zeros(spec.num_params + 1), b)
    with pytest.raises(LayoutError):
        dm.forward_loss(spec, np.zeros(spec.num_params), make_batch(rng, 3, 4, 2))
    bad = Batch(np.array([[np.inf, 0, 0], [0, 0, 0]]), np.array([0, 1]), np.array([41, 42]), np.array([True, True]))
    with pytest.raises(NumericError) as ei:
        dm.forward_loss(spec, np.ones(spec.num_params), bad)
    assert ei.value.example_id == 41


def test_loss_is_stable_for_huge_logits():
    spec = ModelSpec("linear-softmax", 1, 2)
    b = Batch(np.array([[1.0]]), np.array([0]), np.array([0]), np.array([True]))
    val = dm.forward_loss(spec, np.array([1e4, -1e4, 0.0, 0.0]), b)
    assert val == 0.0
    assert dm.forward_loss(spec, np.array([-1e4, 1e4, 0.0, 0.0]), b) == pytest.approx(2e4)


@given(seed=st.integers(0, 2**32 - 1), spec_i=st.integers(0, len(SPECS) - 1))
def test_loss_nonnegative_and_checkpoint_roundtrip(tmp_path_factory, seed, spec_i):
    spec = SPECS[spec_i]
    rng = np.random.default_rng(seed)
    params = rng.normal(scale=3.0, size=spec.num_params)
    assert dm.forward_loss(spec, params, make_batch(rng, 4, spec.input_dim, spec.num_classes)) >= 0.0
    path = tmp_path_factory.mktemp("ck") / "m.vaa"
    dm.save_checkpoint(path, spec, params)
    spec2, p2 = dm.load_checkpoint(path)
    assert spec2 == spec
    assert p2.tobytes() == params.astype("<f8").tobytes()


def test_checkpoint_header_layout(tmp_path):
    import json
    import struct

    spec = SPECS[0]
    params = np.arange(spec.num_params, dtype=float)
    dm.save_checkpoint(tmp_path / "c", spec, params)
    raw = (tmp_path / "c").read_bytes()
    assert raw[:4] == b"VAA1"
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen])
    assert header["num_params"] == spec.num_params and header["layout_id"] == spec.layout_id
    (count,) = struct.unpack_from("<I", raw, 8 + hlen)
    assert count == spec.num_params
    assert np.array_equal(np.frombuffer(raw[12 + hlen:], "<f8"), params)


def test_checkpoint_rejects_garbage(tmp_path):
    from vaalab.errors import FormatError

    (tmp_path / "x").write_bytes(b"NOPE")
    with pytest.raises(FormatError):
        dm.load_checkpoint(tmp_path / "x")
    dm.save_checkpoint(tmp_path / "y", SPECS[0], np.zeros(SPECS[0].num_params))
    data = (tmp_path / "y").read_bytes()
    (tmp_path / "y").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        dm.load_checkpoint(tmp_path / "y")
