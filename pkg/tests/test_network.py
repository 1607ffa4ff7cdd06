import numpy as np
import pytest

from ewmadapt.autograd import Tensor, reduce_sum
from ewmadapt.network import (
    ConfigError,
    FormatError,
    ModelWeights,
    build_classifier,
    build_detector,
    ewm_forward,
    fc_equivalence_check,
    init_weights,
    load_weights,
    save_weights,
)


def test_ewm_forward_hand_case():
    f = Tensor([[1.0, 2.0]])
    c = Tensor([[3.0, 4.0], [5.0, 6.0]])
    m, p = ewm_forward(f, c)
    np.testing.assert_array_equal(m.data, [[[3.0, 10.0], [4.0, 12.0]]])
    np.testing.assert_array_equal(p.data, [[13.0, 16.0]])
    # p must agree with the matmul oracle
    np.testing.assert_array_equal(p.data, f.data @ c.data)


def test_ewm_forward_zero_weights():
    m, p = ewm_forward(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 2))))
    assert not m.data.any() and not p.data.any()


def test_ewm_forward_one_hot_selects_column():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(5, 3))
    f = np.zeros((1, 5))
    f[0, 2] = 1.0
    m, p = ewm_forward(Tensor(f), Tensor(c))
    np.testing.assert_array_equal(p.data[0], c[2])
    for o in range(3):
        expect = np.zeros(5)
        expect[2] = c[2, o]
        np.testing.assert_array_equal(m.data[0, o], expect)


def test_fc_equivalence_random_shapes():
    rng = np.random.default_rng(1)
    for _ in range(25):
        nd, no = rng.integers(1, 65), rng.integers(1, 65)
        b = rng.integers(1, 9)
        diff = fc_equivalence_check(rng.normal(size=(b, nd)), rng.normal(size=(nd, no)))
        assert diff <= 1e-12


def test_fc_equivalence_zero_input():
    assert fc_equivalence_check(np.zeros((3, 4)), np.random.default_rng(2).normal(size=(4, 2))) <= 1e-12


def test_detector_output_shapes():
    model = build_detector(window_size=8, hidden=(32,), feature_dim=16)
    init_weights(model, seed=0)
    out = model.forward(np.random.default_rng(3).normal(size=(5, 64)))
    assert out.box.data.shape == (5, 4)
    assert out.conf.data.shape == (5, 1)
    assert out.ewm.data.shape == (5, 1, 16)


def test_classifier_output_shapes():
    model = build_classifier(input_dim=6, n_classes=3)
    init_weights(model, seed=0)
    out = model.forward(np.zeros((4, 6)))
    assert out.logits.data.shape == (4, 3)
    assert out.box is None


def test_forward_zero_input_finite():
    model = build_detector()
    init_weights(model, seed=4)
    out = model.forward(np.zeros((2, 64)))
    for t in (out.conf, out.box, out.ewm, out.logits):
        assert np.all(np.isfinite(t.data))


def test_box_outputs_bounded():
    model = build_detector()
    init_weights(model, seed=5)
    x = np.random.default_rng(5).normal(size=(40, 64)) * 30
    box = model.forward(x).box.data
    assert np.all(box >= 0.0) and np.all(box <= 1.0)


def test_bad_widths_rejected():
    with pytest.raises(ConfigError):
        build_detector(hidden=(0,))
    with pytest.raises(ConfigError):
        build_classifier(input_dim=4, n_classes=1)


def test_init_deterministic_and_bounded():
    m1 = build_detector()
    m2 = build_detector()
    init_weights(m1, seed=11)
    init_weights(m2, seed=11)
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()

    m3 = build_detector()
    init_weights(m3, seed=12)
    assert any(
        a.data.tobytes() != b.data.tobytes()
        for (_, a), (_, b) in zip(m1.named_parameters(), m3.named_parameters())
    )

    for name, p in m1.named_parameters():
        if p.data.ndim == 2:
            s = np.sqrt(6.0 / sum(p.data.shape))
            assert np.abs(p.data).max() <= s, name


def test_weights_round_trip_bit_exact(tmp_path):
    model = build_detector()
    init_weights(model, seed=21)
    path = tmp_path / "m.weights"
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.arch == model.arch
    for name, p in model.named_parameters():
        assert loaded.tensors[name].tobytes() == p.data.tobytes()
    # and the rebuilt model forwards identically
    rebuilt = loaded.build_model()
    x = np.random.default_rng(6).normal(size=(3, 64))
    np.testing.assert_array_equal(rebuilt.forward(x).conf.data, model.forward(x).conf.data)


def test_load_into_wrong_architecture(tmp_path):
    det = build_detector()
    init_weights(det, seed=1)
    path = tmp_path / "det.weights"
    save_weights(det, path)
    other = build_detector(hidden=(16,))
    with pytest.raises(FormatError):
        load_weights(path).apply_to(other)


def test_truncated_file_rejected(tmp_path):
    det = build_detector()
    init_weights(det, seed=2)
    path = tmp_path / "det.weights"
    blob = save_weights(det, path).to_bytes()
    with pytest.raises(FormatError):
        ModelWeights.from_bytes(blob[: len(blob) - 16])
    with pytest.raises(FormatError):
        ModelWeights.from_bytes(b"XXXX" + blob[4:])
    corrupted = bytearray(blob)
    corrupted[-1] ^= 0xFF
    with pytest.raises(FormatError):
        ModelWeights.from_bytes(bytes(corrupted))


def test_snapshot_initialized_model_matches_source():
    src = build_detector()
    init_weights(src, seed=33)
    snap = ModelWeights.from_model(src)
    tgt = snap.build_model()
    x = np.random.default_rng(7).normal(size=(6, 64))
    a, b = src.forward(x), tgt.forward(x)
    assert a.conf.data.tobytes() == b.conf.data.tobytes()
    assert a.box.data.tobytes() == b.box.data.tobytes()


def test_frozen_model_records_no_graph():
    src = build_detector()
    init_weights(src, seed=34)
    frozen = ModelWeights.from_model(src).build_model(requires_grad=False)
    out = frozen.forward(np.random.default_rng(8).normal(size=(2, 64)))
    loss = reduce_sum(out.conf)
    assert not loss.requires_grad
    for p in frozen.parameters():
        assert p.grad is None
