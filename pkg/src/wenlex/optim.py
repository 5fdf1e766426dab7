"""AdamW with decoupled weight decay and the warmup/decay learning-rate ramp."""

import numpy as np


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """Linear ramp 0 -> base_lr over warmup, then linear decay to 0 at total_steps."""
    if warmup_steps > total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} > total_steps {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr if step == warmup_steps else 0.0
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


class AdamW:
    """Decoupled-weight-decay Adam over named parameter tensors.

    `no_decay` names (e.g. the uncertainty scalars) skip the decay term.
    """

    def __init__(self, named_params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01, no_decay=()):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self):
        """Optimizer state as named arrays for checkpointing."""
        out = {"opt/t": np.array([float(self.t)])}
        for name, _ in self.params:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["opt/t"][0])
        for name, _ in self.params:
            self.m[name] = arrays[f"opt/m/{name}"].copy()
            self.v[name] = arrays[f"opt/v/{name}"].copy()
