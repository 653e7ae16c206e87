"""Fusion decoder: conditioned two-layer LSTM that rolls out track displacements."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .encoder import EncoderOutput, LSTMCell, TCEncoder, lstm_cell_step
from .pressure import PressureCode, PressureDecoder, PressureEncoder

STEP_HOURS = 6


def _uniform(shape, bound, dtype):
    return nn.Parameter(torch.empty(shape, dtype=dtype).uniform_(-bound, bound))


class FusionCell(nn.Module):
    """First decoder layer: LSTM gates driven by E_TC, E_GPH, Y_{t-1} and h_{t-1}.

    Each of ``W_T``, ``W_G``, ``W_Y``, ``W_h`` stacks the i/f/g/o gate blocks
    row-wise. Either code can be switched off (``tc_size=0`` / ``gph_size=0``),
    which removes its term entirely.
    """

    def __init__(self, tc_size: int, gph_size: int, hidden_size: int, out_size: int = 2,
                 dtype=torch.float64):
        super().__init__()
        H = hidden_size
        self.hidden_size = H
        bound = 1.0 / math.sqrt(H)
        self.W_T = _uniform((4 * H, tc_size), bound, dtype) if tc_size else None
        self.W_G = _uniform((4 * H, gph_size), bound, dtype) if gph_size else None
        self.W_Y = _uniform((4 * H, out_size), bound, dtype)
        self.W_h = _uniform((4 * H, H), bound, dtype)
        self.bias = _uniform((4 * H,), bound, dtype)

    def forward(self, e_tc, e_gph, y_prev, state):
        h, c = state
        pre = T.affine(y_prev, self.W_Y) + T.affine(h, self.W_h, self.bias)
        if self.W_T is not None:
            pre = pre + T.affine(e_tc, self.W_T)
        if self.W_G is not None:
            pre = pre + T.affine(e_gph, self.W_G)
        i, f, g, o = pre.chunk(4, dim=-1)
        i, f, o = T.sigmoid(i), T.sigmoid(f), T.sigmoid(o)
        g = T.tanh(g)
        c_next = f * c + i * g
        return o * T.tanh(c_next), c_next


class FusionDecoder(nn.Module):
    def __init__(self, tc_size: int, gph_size: int, hidden_size: int = 128, fc_size: int = 64,
                 out_size: int = 2, dtype=torch.float64):
        super().__init__()
        self.hidden_size = hidden_size
        self.out_size = out_size
        self.cell1 = FusionCell(tc_size, gph_size, hidden_size, out_size, dtype=dtype)
        self.cell2 = LSTMCell(hidden_size, hidden_size, dtype=dtype)
        b1, b2 = 1.0 / math.sqrt(hidden_size), 1.0 / math.sqrt(fc_size)
        self.fc1_weight = _uniform((fc_size, hidden_size), b1, dtype)
        self.fc1_bias = _uniform((fc_size,), b1, dtype)
        self.fc2_weight = _uniform((out_size, fc_size), b2, dtype)
        self.fc2_bias = _uniform((out_size,), b2, dtype)

    def head(self, h: torch.Tensor) -> torch.Tensor:
        return T.affine(T.relu(T.affine(h, self.fc1_weight, self.fc1_bias)), self.fc2_weight, self.fc2_bias)


def fused_step(e_tc, e_gph, y_prev, state, decoder: FusionDecoder):
    """One decode step. ``state`` is ``[(h1, c1), (h2, c2)]``; returns ``(y, state')``."""
    s1 = decoder.cell1(e_tc, e_gph, y_prev, state[0])
    s2 = lstm_cell_step(s1[0], state[1], decoder.cell2)
    return decoder.head(s2[0]), [s1, s2]


def rollout(encoder_out: EncoderOutput | None, pressure_code: PressureCode | None,
            decoder: FusionDecoder, tau: int, batch: int | None = None) -> torch.Tensor:
    """Roll the decoder out ``tau`` steps; returns normalized deltas (B, tau, 2).

    Initial states come from the encoder finals (layer 1 from E1, layer 2 from
    E2), or zeros when there is no TC branch. The first fed-back output is 0.
    """
    if tau < 1:
        raise ValueError(f"rollout needs tau >= 1, got {tau}")
    ref = encoder_out.e_tc if encoder_out is not None else pressure_code.e_gph
    B = ref.shape[0] if batch is None else batch
    H = decoder.hidden_size
    if encoder_out is not None:
        state = [tuple(encoder_out.final_states[0]), tuple(encoder_out.final_states[1])]
        e_tc = encoder_out.e_tc
    else:
        zeros = ref.new_zeros(B, H)
        state = [(zeros, zeros), (zeros, zeros)]
        e_tc = None
    e_gph = pressure_code.e_gph if pressure_code is not None else None
    y = ref.new_zeros(B, decoder.out_size)
    outputs = []
    for _ in range(tau):
        y, state = fused_step(e_tc, e_gph, y, state, decoder)
        outputs.append(y)
    return torch.stack(outputs, dim=1)


def loc_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over horizons and components of |error|, averaged over the batch."""
    if predicted.shape != target.shape:
        raise T.ShapeError(f"loc_loss: incompatible shapes {tuple(predicted.shape)} and {tuple(target.shape)}")
    return (predicted - target).abs().sum(dim=(-1, -2)).mean()


@dataclass
class Forecast:
    """Displacements from the origin position, in degrees, at 6 h steps."""

    deltas: np.ndarray  # (..., tau, 2)
    origin: np.ndarray  # (..., 2)

    @property
    def absolute(self) -> np.ndarray:
        return np.asarray(self.origin)[..., None, :] + np.asarray(self.deltas)

    @property
    def tau(self) -> int:
        return self.deltas.shape[-2]

    @property
    def lead_hours(self) -> list[int]:
        return [STEP_HOURS * (i + 1) for i in range(self.tau)]

    def __getitem__(self, index) -> "Forecast":
        return Forecast(self.deltas[index], self.origin[index])

    def to_text(self) -> str:
        """One line per horizon: ``lead_h lat lon dlat dlon`` (tab separated)."""
        if self.deltas.ndim != 2:
            raise ValueError("to_text expects a single forecast")
        lines = ["lead_h\tlat\tlon\tdlat\tdlon"]
        for lead, (lat, lon), (dlat, dlon) in zip(self.lead_hours, self.absolute, self.deltas):
            lines.append(f"{lead}\t{lat:.4f}\t{lon:.4f}\t{dlat:.4f}\t{dlon:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Forecast":
        rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
        absolute = np.array([[float(r[1]), float(r[2])] for r in rows])
        deltas = np.array([[float(r[3]), float(r[4])] for r in rows])
        return cls(deltas, absolute[0] - deltas[0])


@dataclass
class ModelConfig:
    q: int = 51
    time_steps: int = 5  # m + 1
    tau: int = 4
    n_features: int = 6
    hidden_size: int = 128
    d_gph: int = 128
    fc_size: int = 64
    channels: tuple = (16, 32, 64)
    slope: float = 0.01
    use_tc: bool = True
    use_gph: bool = True
    with_gph_decoder: bool = True


class TrackForecaster(nn.Module):
    """Dual-branch forecaster: TC encoder + pressure branch feeding the fusion decoder.

    ``use_gph=False`` is the TC-features-only ablation, ``use_tc=False`` the
    pressure-fields-only one. The GPH decoder only exists for training.
    """

    def __init__(self, config: ModelConfig | None = None, dtype=torch.float64):
        super().__init__()
        cfg = config or ModelConfig()
        if not (cfg.use_tc or cfg.use_gph):
            raise ValueError("at least one branch must be enabled")
        self.config = cfg
        self.encoder = TCEncoder(cfg.n_features, cfg.hidden_size, dtype=dtype) if cfg.use_tc else None
        self.pressure = None
        self.gph_decoder = None
        if cfg.use_gph:
            self.pressure = PressureEncoder(cfg.q, cfg.time_steps, cfg.d_gph, cfg.channels, cfg.slope, dtype=dtype)
            if cfg.with_gph_decoder:
                self.gph_decoder = PressureDecoder(cfg.q, cfg.time_steps, cfg.channels, cfg.slope, dtype=dtype)
        self.decoder = FusionDecoder(
            cfg.hidden_size if cfg.use_tc else 0,
            cfg.d_gph if cfg.use_gph else 0,
            cfg.hidden_size, cfg.fc_size, dtype=dtype,
        )

    def forward(self, features: torch.Tensor | None, gph: torch.Tensor | None,
                with_gph_prediction: bool = False):
        """Returns ``(deltas, gph_prediction)``; deltas are (B, tau, 2) normalized."""
        enc = self.encoder(features) if self.encoder is not None else None
        code = self.pressure(gph) if self.pressure is not None else None
        deltas = rollout(enc, code, self.decoder, self.config.tau)
        gph_pred = None
        if with_gph_prediction and self.gph_decoder is not None:
            gph_pred = self.gph_decoder(code.f_gph)
        return deltas, gph_pred
