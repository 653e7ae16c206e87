"""Two-layer stacked LSTM encoder over persistence-factor windows."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import tensor as T

GATES = ("i", "f", "g", "o")


class LSTMCell(nn.Module):
    """LSTM cell with separate input and recurrent biases.

    ``weight_ih`` stacks W_ii, W_if, W_ig, W_io row-wise (same for the
    recurrent weights and the two bias vectors), so gate ``k`` occupies rows
    ``k*H:(k+1)*H``.
    """

    def __init__(self, input_size: int, hidden_size: int, dtype=torch.float64):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.weight_ih = nn.Parameter(torch.empty(4 * H, input_size, dtype=dtype))
        self.weight_hh = nn.Parameter(torch.empty(4 * H, H, dtype=dtype))
        self.bias_ih = nn.Parameter(torch.empty(4 * H, dtype=dtype))
        self.bias_hh = nn.Parameter(torch.empty(4 * H, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.hidden_size)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)

    def gate_slice(self, gate: str) -> slice:
        k = GATES.index(gate)
        return slice(k * self.hidden_size, (k + 1) * self.hidden_size)

    def forward(self, x, state):
        return lstm_cell_step(x, state, self)


def lstm_cell_step(x: torch.Tensor, state, params: LSTMCell):
    """One LSTM update; returns ``(h', c')``."""
    h, c = state
    pre = T.affine(x, params.weight_ih, params.bias_ih) + T.affine(h, params.weight_hh, params.bias_hh)
    i, f, g, o = pre.chunk(4, dim=-1)
    i, f, o = T.sigmoid(i), T.sigmoid(f), T.sigmoid(o)
    g = T.tanh(g)
    c_next = f * c + i * g
    h_next = o * T.tanh(c_next)
    return h_next, c_next


@dataclass
class EncoderOutput:
    h_seq: torch.Tensor  # (B, m+1, H) top-layer latents
    final_states: list  # [(h1, c1), (h2, c2)]
    e_tc: torch.Tensor  # (B, H)


class TCEncoder(nn.Module):
    def __init__(self, n_features: int = 6, hidden_size: int = 128, dtype=torch.float64):
        super().__init__()
        self.hidden_size = hidden_size
        self.layer1 = LSTMCell(n_features, hidden_size, dtype=dtype)
        self.layer2 = LSTMCell(hidden_size, hidden_size, dtype=dtype)

    def forward(self, features: torch.Tensor) -> EncoderOutput:
        """Encode ``features`` of shape (B, m+1, p) or (m+1, p)."""
        if features.dim() == 2:
            features = features.unsqueeze(0)
        if features.dim() != 3 or features.shape[1] == 0:
            raise T.ShapeError(f"encode: need a non-empty (B, m+1, p) window, got {tuple(features.shape)}")
        B, steps, _ = features.shape
        zeros = features.new_zeros(B, self.hidden_size)
        s1 = (zeros, zeros)
        s2 = (zeros, zeros)
        top = []
        for k in range(steps):
            s1 = self.layer1(features[:, k], s1)
            s2 = self.layer2(s1[0], s2)
            top.append(s2[0])
        h_seq = torch.stack(top, dim=1)
        return EncoderOutput(h_seq=h_seq, final_states=[s1, s2], e_tc=h_seq.mean(dim=1))


def encode(features: torch.Tensor, encoder: TCEncoder) -> EncoderOutput:
    return encoder(features)
