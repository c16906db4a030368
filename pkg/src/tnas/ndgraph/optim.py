"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

__all__ = ["adam_step", "Adam"]


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update on raw arrays; ``t`` is the 1-based step."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a list of Tensors. A missing gradient counts as zero."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, m, v, self.t, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """(name-suffix, array) pairs for checkpointing, in parameter order."""
        out = []
        for i, _ in enumerate(self.params):
            out.append((f"m{i}", self.m[i]))
            out.append((f"v{i}", self.v[i]))
        return out

    def load_state_arrays(self, arrays, t):
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m{i}"]
            self.v[i] = arrays[f"v{i}"]
        self.t = int(t)
