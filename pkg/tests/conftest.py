"""Shared test utilities: an independent finite-difference gradient oracle."""

import numpy as np
import pytest

from stickformer.autograd import Tape


def numeric_gradients(f, tensors, h=1e-6):
    """Central-difference gradient of scalar f() w.r.t. each tensor, per
    coordinate. Deliberately independent of the tape machinery."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradients(f, tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        out = f()
        tape.backward(out)
    return [t.grad.copy() for t in tensors]


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0))


def assert_grads_match(f, tensors, tol=1e-4):
    analytic = analytic_gradients(f, tensors)
    numeric = numeric_gradients(f, tensors)
    for got, want in zip(analytic, numeric):
        assert rel_err(got, want) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
