"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

import numpy as np


def cosine_lr(step, total_steps, base_lr=2e-4):
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)), floored at 0."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return max(0.0, base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))


class AdamW:
    """Per-parameter first/second moments plus a global step counter.

    The learning rate for each update is taken from the cosine schedule at
    the current (pre-increment) step, so the very first update runs at
    `base_lr`. Weight decay is decoupled (applied to parameters directly,
    not through the moments).
    """

    def __init__(self, params, total_steps, base_lr=2e-4, weight_decay=1e-5,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.total_steps = int(total_steps)
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self):
        return cosine_lr(min(self.step_count, self.total_steps), self.total_steps, self.base_lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """Apply one update from the accumulated gradients.

        Returns False (and leaves all state untouched) if any gradient
        contains NaN, so the caller can abort the step.
        """
        for p in self.params.values():
            if p.grad is not None and np.isnan(p.grad).any():
                return False
        lr = self.current_lr()
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
        self.step_count = t
        return True
