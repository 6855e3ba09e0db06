import struct

import numpy as np
import pytest

from cpcl import tensor as T
from cpcl.errors import BadMagicError, HeaderShapeError, ShapeError, TruncatedError, VersionError
from cpcl.segnet import (ModelState, SegNet, UNetConfig, decoder_param_names, forward,
                         init_weights, load_checkpoint, save_checkpoint, states_equal)
from cpcl.tensor import Tensor


def closed_form_param_count(cin, base, depth, classes=2):
    """27*cin*cout + cout per 3x3x3 conv, cin*cout + cout per 1x1x1 conv."""
    c = [base * 2 ** i for i in range(depth)]
    conv3 = lambda i, o: 27 * i * o + o  # noqa: E731
    conv1 = lambda i, o: i * o + o  # noqa: E731
    total = conv3(cin, c[0]) + conv3(c[0], c[0])
    for i in range(1, depth):
        total += conv3(c[i - 1], c[i]) + conv3(c[i], c[i])
    for i in range(depth - 1):
        total += conv1(c[i + 1], c[i]) + conv3(2 * c[i], c[i]) + conv3(c[i], c[i])
    return total + conv1(c[0], classes)


@pytest.fixture(scope="module")
def state():
    return init_weights(UNetConfig(), seed=3)


def test_forward_shapes(state):
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 16, 16, 16)))
    feat, logits, probs = forward(state.config, state.student, x)
    assert feat.shape == (1, 32, 4, 4, 4)
    assert logits.shape == (1, 2, 16, 16, 16)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


def test_forward_deterministic(state):
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 8, 8, 8)))
    a = forward(state.config, state.student, x)
    b = forward(state.config, state.student, x)
    for u, v in zip(a, b):
        assert u.data.tobytes() == v.data.tobytes()


def test_indivisible_dims(state):
    with pytest.raises(ShapeError):
        forward(state.config, state.student, Tensor(np.zeros((1, 1, 10, 8, 8))))


def test_param_count_closed_form():
    for cfg in (UNetConfig(), UNetConfig(base_channels=4, depth=2), UNetConfig(depth=4)):
        assert cfg.param_count() == closed_form_param_count(1, cfg.base_channels, cfg.depth)
    assert UNetConfig().param_count() == 80546


def test_init_same_seed_bitwise():
    a, b = init_weights(UNetConfig(), 5), init_weights(UNetConfig(), 5)
    assert states_equal(a, b)
    assert not states_equal(a, init_weights(UNetConfig(), 6))


def test_init_teacher_copy_and_bounds(state):
    for name, p in state.student.items():
        assert np.array_equal(p.data, state.teacher[name].data)
        assert not state.teacher[name].requires_grad
        assert not state.momentum[name].any()
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / np.prod(p.shape[1:]))
            assert np.abs(p.data).max() <= bound
        else:
            assert not p.data.any()


def test_encoder_and_decoder_perturbations(state):
    x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 8, 8, 8)))
    f0, l0, _ = forward(state.config, state.student, x)

    def perturbed(name):
        w = dict(state.student)
        w[name] = Tensor(w[name].data + 0.05)
        return forward(state.config, w, x)

    f1, l1, _ = perturbed("enc1.conv2.weight")
    assert not np.array_equal(f0.data, f1.data) and not np.array_equal(l0.data, l1.data)
    for name in ("dec0.conv1.weight", "head.bias"):
        f2, l2, _ = perturbed(name)
        assert np.array_equal(f0.data, f2.data) and not np.array_equal(l0.data, l2.data)
    assert "enc0.conv1.weight" not in decoder_param_names(state.config)


def test_checkpoint_roundtrip(tmp_path, state):
    s = state.clone()
    s.step, s.rng_state = 17, 2**63 + 5
    s.momentum["head.bias"] = np.array([1.5, -2.0], np.float32)
    save_checkpoint(s, tmp_path / "a.cpck")
    assert states_equal(s, load_checkpoint(tmp_path / "a.cpck"))


def test_checkpoint_header_layout(tmp_path, state):
    save_checkpoint(state, tmp_path / "a.cpck")
    raw = (tmp_path / "a.cpck").read_bytes()
    magic, version, step, rng, sections = struct.unpack_from("<4sIQQI", raw)
    assert (magic, version, step, rng, sections) == (b"CPCK", 1, 0, state.rng_state, 3)
    kind, count = struct.unpack_from("<BI", raw, 28)
    assert (kind, count) == (0, len(state.student))


def _corrupt(tmp_path, state, fn):
    save_checkpoint(state, tmp_path / "c.cpck")
    raw = bytearray((tmp_path / "c.cpck").read_bytes())
    raw = fn(raw)
    (tmp_path / "c.cpck").write_bytes(bytes(raw))
    return tmp_path / "c.cpck"


def test_checkpoint_bad_magic(tmp_path, state):
    p = _corrupt(tmp_path, state, lambda r: b"XXXX" + r[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(p)


def test_checkpoint_version(tmp_path, state):
    p = _corrupt(tmp_path, state, lambda r: r[:4] + struct.pack("<I", 9) + r[8:])
    with pytest.raises(VersionError):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path, state):
    p = _corrupt(tmp_path, state, lambda r: r[:-10])
    with pytest.raises(TruncatedError):
        load_checkpoint(p)


def test_checkpoint_shape_mismatch(tmp_path, state):
    save_checkpoint(state, tmp_path / "a.cpck")
    with pytest.raises(HeaderShapeError):
        load_checkpoint(tmp_path / "a.cpck", UNetConfig(base_channels=4))
    p = _corrupt(tmp_path, state, lambda r: r + b"\0\0")
    with pytest.raises(HeaderShapeError):
        load_checkpoint(p)


def test_segnet_probs_no_tape(state):
    net = SegNet(state.config)
    p = net.probs(state.student, np.zeros((1, 1, 8, 8, 8), np.float32))
    assert p.shape == (1, 2, 8, 8, 8)
