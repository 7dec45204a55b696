"""AdamW and learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .errors import ScheduleError


class AdamW:
    """Adam with decoupled weight decay over a fixed list of parameter tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def owns(self, params) -> bool:
        mine = {id(p) for p in self.params}
        return mine == {id(p) for p in params}

    def step(self, lr: float):
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"m{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"v{i}"], dtype=np.float64)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Cosine decay from ``lr0`` at step 0 to zero at ``total``."""
    if total <= 0 or step < 0 or step > total:
        raise ScheduleError(f"step {step} outside schedule of length {total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def multistep_lr(epoch: int, lr0: float, milestones, gamma: float = 0.1) -> float:
    """Step decay: multiply by ``gamma`` at every milestone epoch already reached."""
    if epoch < 0:
        raise ScheduleError(f"negative epoch {epoch}")
    return lr0 * gamma ** sum(1 for m in milestones if epoch >= m)
