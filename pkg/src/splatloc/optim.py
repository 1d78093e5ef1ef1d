"""Adam over named numpy parameter groups."""

import numpy as np


class Adam:
    """Adam with one learning rate per named group.

    Moments are stored per group with the same shape as the parameter, so
    groups can be resized (density control) through :meth:`remap`.
    """

    def __init__(self, shapes, lr, betas=(0.9, 0.999), eps=1e-15):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params, grads, lr_scale=None):
        """Update ``params`` in place and return the applied steps."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        steps = {}
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.lr[k] * (1.0 if lr_scale is None else lr_scale.get(k, 1.0))
            d = -lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] += d
            steps[k] = d
        return steps

    def remap(self, source, fresh):
        """Reorder per-row moments after the parameter rows were rebuilt.

        ``source[i]`` is the old row that new row ``i`` came from; rows with
        ``fresh[i]`` set start from zero moments.
        """
        source = np.asarray(source, dtype=np.int64)
        fresh = np.asarray(fresh, dtype=bool)
        for store in (self.m, self.v):
            for k, a in store.items():
                b = a[source].copy()
                b[fresh] = 0.0
                store[k] = b
