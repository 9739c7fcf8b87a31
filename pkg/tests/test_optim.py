"""AdamW: fixed points, descent, and the frozen scalar-oracle transcript."""

import numpy as np
import pytest

from stickformer import autograd as ag
from stickformer.autograd import NonFiniteError, Tape
from stickformer.optim import AdamW


def test_zero_grad_zero_decay_is_fixed_point():
    p = ag.parameter([1.0, -2.0, 3.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(3)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_one_step_descends_quadratic():
    w = ag.parameter([1.0])
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    with Tape() as tape:
        tape.backward(ag.tsum(ag.mul(w, w)))
    opt.step()
    assert abs(w.data[0]) < 1.0


def test_three_steps_match_scalar_oracle_transcript():
    # frozen from the hand-rolled oracle: w0=1, f=w^2, lr=0.1,
    # betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1
    expected = [0.8900000004999999, 0.7815718559365048, 0.6751012216400698]
    w = ag.parameter([1.0])
    opt = AdamW({"w": w}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    for step in range(3):
        with Tape() as tape:
            tape.backward(ag.tsum(ag.mul(w, w)))
        opt.step()
        opt.zero_grad()
        assert w.data[0] == pytest.approx(expected[step], abs=1e-12)


def test_non_finite_gradient_aborts_with_diagnostic():
    p = ag.parameter([1.0])
    opt = AdamW({"spiky": p}, lr=0.1)
    p.grad = np.array([np.inf])
    with pytest.raises(NonFiniteError, match="spiky"):
        opt.step()
    assert opt.step_count == 0


def test_missing_grad_is_skipped():
    a = ag.parameter([1.0])
    b = ag.parameter([2.0])
    opt = AdamW({"a": a, "b": b}, lr=0.1)
    a.grad = np.array([1.0])
    before_b = b.data.copy()
    opt.step()
    assert np.array_equal(b.data, before_b)
    assert a.data[0] != 1.0


def test_state_roundtrip_reproduces_updates():
    def fresh():
        p = ag.parameter([1.0, 2.0])
        return p, AdamW({"p": p}, lr=0.05, weight_decay=0.01)

    p1, opt1 = fresh()
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=2) for _ in range(5)]
    for g in grads[:3]:
        p1.grad = g.copy()
        opt1.step()
    state = opt1.state_dict()
    saved_data = p1.data.copy()

    p2, opt2 = fresh()
    p2.data = saved_data.copy()
    opt2.load_state_dict(state)
    for g in grads[3:]:
        p1.grad = g.copy()
        opt1.step()
        p2.grad = g.copy()
        opt2.step()
    assert np.array_equal(p1.data, p2.data)
