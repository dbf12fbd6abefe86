"""LSTM / GRU cells built from autodiff primitives, plus initializers.

Conventions (fixed and relied on by the training code):
  * row-vector layout: x is (1, in_dim), hidden states are (1, hidden)
  * LSTM gate order in the fused projection is (i, f, g, o)
  * GRU uses the update-gate convention h = (1-z)*h_prev + z*h_cand,
    so z == 0 keeps the previous hidden state
  * weights are initialized uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    biases zero except the LSTM forget gate at +1
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LstmLayer:
    wx: Tensor  # (in_dim, 4*hidden)
    wh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (1, 4*hidden)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


@dataclass
class GruParams:
    wx_zr: Tensor  # (in_dim, 2*hidden), order (z, r)
    wh_zr: Tensor  # (hidden, 2*hidden)
    b_zr: Tensor  # (1, 2*hidden)
    wx_n: Tensor  # (in_dim, hidden)
    wh_n: Tensor  # (hidden, hidden)
    b_n: Tensor  # (1, hidden)

    @property
    def hidden(self) -> int:
        return self.wh_n.shape[0]


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int, n_layers: int, dtype=np.float64) -> list[LstmLayer]:
    layers = []
    for layer in range(n_layers):
        d_in = in_dim if layer == 0 else hidden
        b = np.zeros((1, 4 * hidden), dtype=dtype)
        b[0, hidden : 2 * hidden] = 1.0  # forget-gate bias
        layers.append(
            LstmLayer(
                wx=ad.parameter(uniform_init(rng, d_in, (d_in, 4 * hidden), dtype)),
                wh=ad.parameter(uniform_init(rng, hidden, (hidden, 4 * hidden), dtype)),
                b=ad.parameter(b),
            )
        )
    return layers


def init_gru(rng: np.random.Generator, in_dim: int, hidden: int, dtype=np.float64) -> GruParams:
    return GruParams(
        wx_zr=ad.parameter(uniform_init(rng, in_dim, (in_dim, 2 * hidden), dtype)),
        wh_zr=ad.parameter(uniform_init(rng, hidden, (hidden, 2 * hidden), dtype)),
        b_zr=ad.parameter(np.zeros((1, 2 * hidden), dtype=dtype)),
        wx_n=ad.parameter(uniform_init(rng, in_dim, (in_dim, hidden), dtype)),
        wh_n=ad.parameter(uniform_init(rng, hidden, (hidden, hidden), dtype)),
        b_n=ad.parameter(np.zeros((1, hidden), dtype=dtype)),
    )


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmLayer) -> tuple[Tensor, Tensor]:
    """One LSTM step: returns (h, c)."""
    n = p.hidden
    gates = ad.matmul(x, p.wx) + ad.matmul(h_prev, p.wh) + p.b
    i = ad.sigmoid(ad.narrow(gates, 1, 0, n))
    f = ad.sigmoid(ad.narrow(gates, 1, n, n))
    g = ad.tanh(ad.narrow(gates, 1, 2 * n, n))
    o = ad.sigmoid(ad.narrow(gates, 1, 3 * n, n))
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def lstm_stack_step(
    x: Tensor, states: list[tuple[Tensor, Tensor]], layers: list[LstmLayer]
) -> list[tuple[Tensor, Tensor]]:
    """One step through stacked layers; input to layer l is layer l-1's h."""
    if len(states) != len(layers):
        raise ValueError("state/layer count mismatch")
    new_states = []
    inp = x
    for (h_prev, c_prev), layer in zip(states, layers):
        h, c = lstm_cell(inp, h_prev, c_prev, layer)
        new_states.append((h, c))
        inp = h
    return new_states


def lstm_zero_state(layers: list[LstmLayer], dtype=np.float64) -> list[tuple[Tensor, Tensor]]:
    return [(ad.zeros((1, p.hidden), dtype), ad.zeros((1, p.hidden), dtype)) for p in layers]


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step: z,r gates then candidate; h = (1-z)*h_prev + z*h_cand."""
    n = p.hidden
    zr = ad.sigmoid(ad.matmul(x, p.wx_zr) + ad.matmul(h_prev, p.wh_zr) + p.b_zr)
    z = ad.narrow(zr, 1, 0, n)
    r = ad.narrow(zr, 1, n, n)
    h_cand = ad.tanh(ad.matmul(x, p.wx_n) + ad.matmul(r * h_prev, p.wh_n) + p.b_n)
    one = ad.constant(np.ones((1, n), dtype=x.data.dtype))
    return (one - z) * h_prev + z * h_cand
