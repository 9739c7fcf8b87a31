"""AdamW with decoupled weight decay, operating on named parameter dicts.

Moments live in flat buffers spanning every parameter, so one step is a
handful of vector operations instead of a Python loop per tensor; the
update arithmetic per element is the textbook form and is bit-deterministic.
"""

from __future__ import annotations

import numpy as np

from .autograd import NonFiniteError, Tensor


class AdamW:
    """Bias-corrected Adam moments plus decoupled weight decay.

    One update per parameter p with gradient g:

        m <- b1*m + (1-b1)*g
        v <- b2*v + (1-b2)*g^2
        p <- p - lr * ( m/(1-b1^t) / (sqrt(v/(1-b2^t)) + eps) + wd*p )

    The decay term uses the pre-update value of p. Parameters without a
    gradient are skipped. Non-finite gradients abort the step.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._names = list(self.params)
        self._shapes = [self.params[n].data.shape for n in self._names]
        sizes = [self.params[n].size for n in self._names]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        total = int(self._offsets[-1])
        self._flat_m = np.zeros(total)
        self._flat_v = np.zeros(total)

    def _slice(self, flat: np.ndarray, i: int) -> np.ndarray:
        view = flat[self._offsets[i]:self._offsets[i + 1]]
        return view.reshape(self._shapes[i])

    @property
    def m(self) -> dict[str, np.ndarray]:
        return {n: self._slice(self._flat_m, i) for i, n in enumerate(self._names)}

    @property
    def v(self) -> dict[str, np.ndarray]:
        return {n: self._slice(self._flat_v, i) for i, n in enumerate(self._names)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _gather_grads(self) -> np.ndarray:
        parts = []
        for name in self._names:
            p = self.params[name]
            g = p.grad
            if g is None:
                parts.append(np.zeros(p.size))
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"AdamW: gradient shape {g.shape} != parameter "
                                 f"shape {p.data.shape} for '{name}'")
            parts.append(np.ascontiguousarray(g).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def step(self) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        grads = self._gather_grads()
        if not np.isfinite(grads.sum()) and not np.isfinite(grads).all():
            bad = next(name for name in self._names
                       if self.params[name].grad is not None
                       and not np.all(np.isfinite(self.params[name].grad)))
            self.step_count -= 1
            raise NonFiniteError(
                f"AdamW step {t}: non-finite gradient for parameter '{bad}'")
        m = self._flat_m
        v = self._flat_v
        m *= b1
        m += (1.0 - b1) * grads
        v *= b2
        v += (1.0 - b2) * (grads * grads)
        update = (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + self.eps)
        for i, name in enumerate(self._names):
            p = self.params[name]
            step = self._slice(update, i)
            if self.weight_decay:
                p.data = p.data - self.lr * (step + self.weight_decay * p.data)
            else:
                p.data = p.data - self.lr * step

    def state_dict(self) -> dict:
        """Arrays and counters needed to resume bit-exactly."""
        return {
            "step_count": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for i, name in enumerate(self._names):
            self._slice(self._flat_m, i)[...] = state["m"][name]
            self._slice(self._flat_v, i)[...] = state["v"][name]
