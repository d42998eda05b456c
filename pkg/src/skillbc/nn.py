"""Parameter tensors and the two network blocks used everywhere (MLP, LSTM)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError


class Param(Var):
    """A named, trainable tensor (float64 while training)."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        if not np.all(np.isfinite(self.data)):
            raise ConfigError(f"parameter {name!r} has non-finite values")
        self.name = name

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape})"


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MLP:
    """Feedforward block: tanh hidden layers, linear output."""

    def __init__(self, name: str, in_dim: int, hidden, out_dim: int,
                 rng: np.random.Generator):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        widths = [in_dim, *hidden, out_dim]
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(Param(f"{name}.w{i}", uniform_fan_in(rng, (a, b), a)))
            self.biases.append(Param(f"{name}.b{i}", np.zeros((1, b))))

    def params(self) -> list[Param]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __call__(self, x) -> Var:
        x = ad.as_var(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ConfigError(
                f"{self.name}: expected input (batch, {self.in_dim}), got {x.data.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = ad.tanh(h)
        return h


class LSTM:
    """Stacked gated recurrent cells (input/forget/output gates, tanh candidate).

    Gate pre-activations come from one fused matmul per layer, sliced in the
    order i, f, g, o. Forget-gate biases start at 1.0.
    """

    def __init__(self, name: str, in_dim: int, hidden: int, layers: int,
                 rng: np.random.Generator):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden
        self.layers = layers
        self.wx = []
        self.wh = []
        self.b = []
        for l in range(layers):
            d = in_dim if l == 0 else hidden
            self.wx.append(Param(f"{name}.l{l}.wx", uniform_fan_in(rng, (d, 4 * hidden), d)))
            self.wh.append(Param(f"{name}.l{l}.wh",
                                 uniform_fan_in(rng, (hidden, 4 * hidden), hidden)))
            bias = np.zeros((1, 4 * hidden))
            bias[0, hidden:2 * hidden] = 1.0
            self.b.append(Param(f"{name}.l{l}.b", bias))

    def params(self) -> list[Param]:
        out = []
        for l in range(self.layers):
            out.extend([self.wx[l], self.wh[l], self.b[l]])
        return out

    def initial_state(self, batch: int):
        zero = lambda: Var(np.zeros((batch, self.hidden)))
        return [(zero(), zero()) for _ in range(self.layers)]

    def step(self, x, state):
        """One time step. Returns (top-layer output, new state)."""
        x = ad.as_var(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ConfigError(
                f"{self.name}: expected input (batch, {self.in_dim}), got {x.data.shape}")
        h = self.hidden
        new_state = []
        inp = x
        for l in range(self.layers):
            h_prev, c_prev = state[l]
            pre = inp @ self.wx[l] + h_prev @ self.wh[l] + self.b[l]
            i = ad.sigmoid(pre[:, 0:h])
            f = ad.sigmoid(pre[:, h:2 * h])
            g = ad.tanh(pre[:, 2 * h:3 * h])
            o = ad.sigmoid(pre[:, 3 * h:4 * h])
            c = f * c_prev + i * g
            hy = o * ad.tanh(c)
            new_state.append((hy, c))
            inp = hy
        return inp, new_state

    def run(self, xs, state=None):
        """Run over a sequence of (batch, in_dim) inputs; causal by construction."""
        if len(xs) == 0:
            raise ConfigError(f"{self.name}: empty input sequence")
        if state is None:
            first = ad.as_var(xs[0])
            state = self.initial_state(first.data.shape[0])
        outputs = []
        for x in xs:
            out, state = self.step(x, state)
            outputs.append(out)
        return outputs, state


def params_dict(params) -> dict[str, np.ndarray]:
    """Name -> value snapshot (copies) in the given parameter order."""
    out = {}
    for p in params:
        if p.name in out:
            raise ConfigError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p.data.copy()
    return out


def load_params(params, values: dict[str, np.ndarray]):
    """Assign stored values into live parameters, validating shapes."""
    for p in params:
        if p.name not in values:
            raise ConfigError(f"checkpoint is missing parameter {p.name!r}")
        v = np.asarray(values[p.name], dtype=np.float64)
        if v.shape != p.data.shape:
            raise ConfigError(
                f"shape mismatch for {p.name!r}: checkpoint {v.shape}, model {p.data.shape}")
        p.data = v.copy()
