import numpy as np
import pytest
import torch

from tcfusion import tensor as T
from tcfusion.encoder import LSTMCell, TCEncoder, encode, lstm_cell_step


def zero_cell(n_in=3, H=4):
    cell = LSTMCell(n_in, H)
    with torch.no_grad():
        for p in cell.parameters():
            p.zero_()
    return cell


def reference_step(x, h, c, cell):
    """Gate equations written out one gate at a time."""
    H = cell.hidden_size
    W, U, b, d = cell.weight_ih, cell.weight_hh, cell.bias_ih, cell.bias_hh
    gate = lambda k: x @ W[k * H:(k + 1) * H].T + b[k * H:(k + 1) * H] + h @ U[k * H:(k + 1) * H].T + d[k * H:(k + 1) * H]  # noqa: E731
    i, f, g, o = torch.sigmoid(gate(0)), torch.sigmoid(gate(1)), torch.tanh(gate(2)), torch.sigmoid(gate(3))
    c2 = f * c + i * g
    return o * torch.tanh(c2), c2


def test_cell_matches_gate_equations():
    cell = LSTMCell(3, 5)
    x, h, c = torch.randn(2, 3, dtype=torch.float64), torch.randn(2, 5, dtype=torch.float64), torch.randn(2, 5, dtype=torch.float64)
    h1, c1 = lstm_cell_step(x, (h, c), cell)
    h2, c2 = reference_step(x, h, c, cell)
    torch.testing.assert_close(h1, h2, rtol=1e-14, atol=1e-14)
    torch.testing.assert_close(c1, c2, rtol=1e-14, atol=1e-14)


def test_zero_cell_gives_zero_state():
    cell = zero_cell()
    z = torch.zeros(1, 4, dtype=torch.float64)
    pre = []
    h, c = lstm_cell_step(torch.zeros(1, 3, dtype=torch.float64), (z, z), cell)
    assert torch.all(h == 0) and torch.all(c == 0)


def test_forget_gate_retains_memory():
    cell = zero_cell(2, 3)
    with torch.no_grad():
        cell.bias_hh[cell.gate_slice("f")] = 20.0
        cell.bias_hh[cell.gate_slice("i")] = -20.0
    c = torch.full((1, 3), 50.0, dtype=torch.float64)
    _, c2 = lstm_cell_step(torch.randn(1, 2, dtype=torch.float64), (torch.zeros(1, 3, dtype=torch.float64), c), cell)
    assert torch.max(torch.abs(c2 - c)).item() < 1e-6 * 50.0
    # f = sigmoid(20), i = sigmoid(-20): c' = c * sigmoid(20) exactly
    assert torch.max(torch.abs(c2 - c * torch.sigmoid(torch.tensor(20.0, dtype=torch.float64)))).item() < 1e-8


def test_cell_gradients_match_finite_differences():
    cell = LSTMCell(3, 4)
    x = torch.randn(2, 3, dtype=torch.float64)
    h = torch.randn(2, 4, dtype=torch.float64) * 0.5
    c = torch.randn(2, 4, dtype=torch.float64)
    w = torch.randn(2, 4, dtype=torch.float64)
    errors = T.module_gradient_check(lambda: (lstm_cell_step(x, (h, c), cell)[0] * w).sum(), cell)
    assert max(errors.values()) < 1e-6


def test_encoder_gradients_match_finite_differences():
    enc = TCEncoder(6, 5)
    x = torch.randn(3, 5, 6, dtype=torch.float64)
    w = torch.randn(3, 5, dtype=torch.float64)
    errors = T.module_gradient_check(lambda: (enc(x).e_tc * w).sum(), enc)
    assert max(errors.values()) < 1e-5


def test_e_tc_is_mean_of_top_latents():
    enc = TCEncoder(6, 8)
    out = enc(torch.randn(4, 5, 6, dtype=torch.float64))
    torch.testing.assert_close(out.e_tc, out.h_seq.mean(dim=1))
    assert out.h_seq.shape == (4, 5, 8)
    assert torch.equal(out.final_states[1][0], out.h_seq[:, -1])


def test_single_row_window():
    enc = TCEncoder(6, 8)
    out = encode(torch.randn(1, 6, dtype=torch.float64), enc)
    assert torch.equal(out.e_tc, out.h_seq[:, 0])


def test_zero_params_give_zero_code():
    enc = TCEncoder(6, 4)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    out = enc(torch.ones(2, 5, 6, dtype=torch.float64))
    assert torch.all(out.e_tc == 0) and torch.all(out.h_seq == 0)


def test_order_sensitivity():
    enc = TCEncoder(6, 8)
    x = torch.randn(1, 5, 6, dtype=torch.float64)
    perm = x[:, [4, 2, 0, 3, 1]]
    assert not torch.allclose(enc(x).e_tc, enc(perm).e_tc)


def test_latents_bounded():
    enc = TCEncoder(6, 8)
    with torch.no_grad():
        for p in enc.parameters():
            p.mul_(20.0)
    out = enc(torch.randn(8, 5, 6, dtype=torch.float64) * 50)
    assert torch.all(out.h_seq.abs() <= 1.0)
    assert torch.all(out.final_states[0][0].abs() <= 1.0)


def test_empty_window_rejected():
    with pytest.raises(T.ShapeError, match="non-empty"):
        TCEncoder(6, 4)(torch.zeros(1, 0, 6, dtype=torch.float64))


def test_init_range():
    cell = LSTMCell(6, 16)
    bound = 1 / np.sqrt(16)
    assert all(p.abs().max().item() <= bound for p in cell.parameters())
