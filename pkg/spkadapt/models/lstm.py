#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.

"""
Single-direction LSTM kernels over one utterance, full-sequence BPTT.

Gate pre-activations are laid out in blocks [g, i, f, o] of width H:
    z_t = x_t W_x + h_prev W_h + b
    c_t = sigmoid(i) * tanh(g) + sigmoid(f) * c_prev
    h_t = sigmoid(o) * tanh(c_t)
A reverse kernel walks t = T-1 .. 0, so "prev" is t+1.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass
class LstmCache:
    inputs: np.ndarray
    hidden: np.ndarray
    cells: np.ndarray
    gates: np.ndarray
    order: np.ndarray


def lstm_forward(inputs, w_input, w_hidden, bias, reverse=False):
    """Run one LSTM direction over a T x d input.

    Returns:
    tuple: (T x H hidden outputs in time order, LstmCache for lstm_backward)
    """
    num_frames = inputs.shape[0]
    size = w_hidden.shape[0]
    projected = inputs @ w_input + bias
    hidden = np.zeros((num_frames, size))
    cells = np.zeros((num_frames, size))
    gates = np.zeros((num_frames, 4 * size))
    order = np.arange(num_frames)[::-1] if reverse else np.arange(num_frames)

    h_prev = np.zeros(size)
    c_prev = np.zeros(size)
    for t in order:
        z = projected[t] + h_prev @ w_hidden
        g = np.tanh(z[:size])
        ifo = expit(z[size:])
        i, f, o = ifo[:size], ifo[size:2 * size], ifo[2 * size:]
        c_prev = i * g + f * c_prev
        h_prev = o * np.tanh(c_prev)
        gates[t, :size] = g
        gates[t, size:] = ifo
        cells[t] = c_prev
        hidden[t] = h_prev
    return hidden, LstmCache(inputs, hidden, cells, gates, order)


def lstm_backward(d_hidden, w_input, w_hidden, cache: LstmCache):
    """Backpropagate T x H output gradients through one LSTM direction.

    Returns:
    tuple: (d_inputs, d_w_input, d_w_hidden, d_bias)
    """
    num_frames, size = d_hidden.shape
    d_pre = np.zeros((num_frames, 4 * size))
    d_w_hidden = np.zeros_like(w_hidden)
    dh_next = np.zeros(size)
    dc_next = np.zeros(size)
    zeros = np.zeros(size)

    for step in range(num_frames - 1, -1, -1):
        t = cache.order[step]
        prev = cache.order[step - 1] if step > 0 else None
        h_prev = cache.hidden[prev] if prev is not None else zeros
        c_prev = cache.cells[prev] if prev is not None else zeros
        g = cache.gates[t, :size]
        i = cache.gates[t, size:2 * size]
        f = cache.gates[t, 2 * size:3 * size]
        o = cache.gates[t, 3 * size:]
        tanh_c = np.tanh(cache.cells[t])

        dh = d_hidden[t] + dh_next
        dc = dh * o * (1.0 - tanh_c ** 2) + dc_next
        dz = d_pre[t]
        dz[:size] = dc * i * (1.0 - g ** 2)
        dz[size:2 * size] = dc * g * i * (1.0 - i)
        dz[2 * size:3 * size] = dc * c_prev * f * (1.0 - f)
        dz[3 * size:] = dh * tanh_c * o * (1.0 - o)

        d_w_hidden += np.outer(h_prev, dz)
        dh_next = w_hidden @ dz
        dc_next = dc * f

    d_w_input = cache.inputs.T @ d_pre
    d_bias = d_pre.sum(axis=0)
    d_inputs = d_pre @ w_input.T
    return d_inputs, d_w_input, d_w_hidden, d_bias
