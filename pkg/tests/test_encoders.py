import time

import numpy as np
import pytest

from brmil import numcore as nc
from brmil.encoders import (STUDENT_DEFAULT, TEACHER_DEFAULT, Encoder, EncoderConfig, channel_attention,
                            student_forward, teacher_forward)
from brmil.numcore import Tensor


def onehot_batch(g, n, used=40):
    x = np.zeros((n, 10, 50))
    cols = np.arange(used)
    for i in range(n):
        x[i, g.integers(0, 4, size=used), cols] = 1
        x[i, 5 + g.integers(0, 4, size=used), cols] = 1
    u = np.c_[g.random(n), g.uniform(6, 10, size=n)]
    return x, u


SMALL = [EncoderConfig("teacher", d=8, conv1=4, conv2=4, hidden=8), EncoderConfig("student", d=6, conv1=3)]


@pytest.mark.parametrize("cfg", SMALL, ids=lambda c: c.kind)
def test_zero_head_gives_bias(cfg, rng):
    enc = Encoder(cfg, 1)
    enc.params["z.w"].data[:] = 0.0
    enc.params["z.b"].data[:] = 0.37
    x, u = onehot_batch(rng, 5)
    _, z = enc.encode(x, u)
    np.testing.assert_array_equal(z, np.full(5, 0.37))


@pytest.mark.parametrize("cfg", SMALL, ids=lambda c: c.kind)
def test_padding_column_permutation_is_invisible(cfg, rng):
    enc = Encoder(cfg, 2)
    x, u = onehot_batch(rng, 3, used=30)
    perm = np.r_[np.arange(30), 30 + rng.permutation(20)]
    a = enc.encode(x, u)
    b = enc.encode(x[:, :, perm], u)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_default_output_dims(rng):
    x, u = onehot_batch(rng, 2)
    t = teacher_forward(Encoder(TEACHER_DEFAULT), x[0], u[0])
    s = student_forward(Encoder(STUDENT_DEFAULT), x[0], u[0])
    assert t.h.shape == (384,) and isinstance(t.z, float)
    assert s.h.shape == (64,) and isinstance(s.z, float)


def test_deterministic_forward(rng):
    x, u = onehot_batch(rng, 4)
    a = Encoder(SMALL[0], 9).encode(x, u)
    b = Encoder(SMALL[0], 9).encode(x, u)
    assert a[0].tobytes() == b[0].tobytes()


def test_call_counter_counts_candidates(rng):
    enc = Encoder(SMALL[1])
    x, u = onehot_batch(rng, 7)
    enc.encode(x, u, batch=3)
    assert enc.calls == 7


def test_bad_shape_rejected():
    with pytest.raises(ValueError):
        Encoder(SMALL[0]).forward(np.zeros((2, 10, 40)), np.zeros((2, 2)))


def test_channel_attention_zero_gate_halves(rng):
    f = rng.normal(size=(2, 7, 4))
    out = channel_attention(Tensor(f), np.zeros((4, 2)), np.zeros(2), np.zeros((2, 4)), np.zeros(4))
    np.testing.assert_allclose(out.data, f / 2, rtol=0, atol=0)


def test_channel_attention_equal_channels_equal_gates(rng):
    col = rng.normal(size=(1, 6, 1))
    f = np.repeat(col, 3, axis=2)
    w1 = np.repeat(rng.normal(size=(1, 2)), 3, axis=0)
    out = channel_attention(Tensor(f), w1, rng.normal(size=2), rng.normal(size=(2, 1)).repeat(3, axis=1),
                            np.full(3, 0.1)).data
    np.testing.assert_array_equal(out[..., 0], out[..., 1])
    np.testing.assert_array_equal(out[..., 1], out[..., 2])
    # gate is position independent: ratio out/in is constant along the width
    ratio = out[0, :, 0] / f[0, :, 0]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_student_cheaper_than_teacher(rng):
    x, u = onehot_batch(rng, 256)
    t_enc, s_enc = Encoder(TEACHER_DEFAULT), Encoder(STUDENT_DEFAULT)

    def best(enc):
        out = []
        for _ in range(3):
            t = time.perf_counter()
            enc.encode(x, u)
            out.append(time.perf_counter() - t)
        return min(out)
    assert best(s_enc) < best(t_enc)
