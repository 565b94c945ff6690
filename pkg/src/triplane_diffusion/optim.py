"""Adam optimizer with serializable state."""

import math

import numpy as np


class Adam:
    """Adaptive-moment optimizer (no weight decay).

    Defaults follow the training setup: lr 1e-4, betas (0.9, 0.99).
    A step from fresh state with zero gradients leaves parameters
    unchanged; moments update deterministically either way, so resumed
    runs stay bit-identical to uninterrupted ones.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.99), eps=1e-8):
        self.named = list(named_params)
        seen = set()
        for name, _ in self.named:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self):
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.named:
            p.zero_grad()

    def state_dict(self):
        state = {"step_count": np.array(self.steps, dtype=np.int64)}
        for name in self.m:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state):
        self.steps = int(np.asarray(state["step_count"]).item())
        for name in self.m:
            self.m[name] = np.array(state[f"m/{name}"])
            self.v[name] = np.array(state[f"v/{name}"])
