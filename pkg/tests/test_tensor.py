import zlib

import numpy as np
import pytest
import torch

from tcfusion import tensor as T

TRIALS = 100


def _r(gen, *shape):
    return torch.as_tensor(gen.normal(size=shape), dtype=torch.float64)


def _weighted(op, out_shape_fn=None):
    """Turn a tensor-valued op into a scalar by a fixed random projection."""
    def fn(*args):
        out = op(*args)
        w = torch.as_tensor(np.random.default_rng(99).normal(size=tuple(out.shape)), dtype=out.dtype)
        return (out * w).sum()
    return fn


# name -> (function, input builder)
PRIMITIVES = {
    "affine": (_weighted(T.affine), lambda g: [_r(g, 2, 3), _r(g, 4, 3), _r(g, 4)]),
    "conv1d": (_weighted(lambda x, k, b: T.conv(x, k, b)), lambda g: [_r(g, 1, 2, 5), _r(g, 3, 2, 3), _r(g, 3)]),
    "conv2d": (_weighted(lambda x, k, b: T.conv(x, k, b, padding=1)), lambda g: [_r(g, 1, 1, 4, 4), _r(g, 2, 1, 3, 3), _r(g, 2)]),
    "conv3d": (_weighted(lambda x, k, b: T.conv(x, k, b, padding=(0, 1, 1))),
               lambda g: [_r(g, 1, 1, 3, 3, 3), _r(g, 2, 1, 3, 3, 3), _r(g, 2)]),
    "conv_transpose2d": (_weighted(lambda x, k, b: T.conv_transpose(x, k, b, stride=2, output_size=(5, 5))),
                         lambda g: [_r(g, 1, 2, 2, 2), _r(g, 2, 1, 2, 2), _r(g, 1)]),
    "conv_transpose3d": (_weighted(lambda x, k, b: T.conv_transpose(x, k, b, stride=(1, 2, 2))),
                         lambda g: [_r(g, 1, 1, 1, 2, 2), _r(g, 1, 2, 3, 2, 2), _r(g, 2)]),
    "maxpool2d": (_weighted(lambda x: T.maxpool(x, (2, 2))), lambda g: [_r(g, 1, 1, 4, 5)]),
    "maxpool3d": (_weighted(lambda x: T.maxpool(x, (1, 2, 2))), lambda g: [_r(g, 1, 1, 2, 4, 4)]),
    "sigmoid": (_weighted(T.sigmoid), lambda g: [_r(g, 5)]),
    "tanh": (_weighted(T.tanh), lambda g: [_r(g, 5)]),
    "relu": (_weighted(T.relu), lambda g: [_r(g, 5)]),
    "leaky_relu": (_weighted(lambda x: T.leaky_relu(x, 0.01)), lambda g: [_r(g, 5)]),
    "l1_loss": (lambda a, b: T.l1_loss(a, b), lambda g: [_r(g, 4), _r(g, 4)]),
    "l2_penalty": (lambda a, b: T.l2_penalty([a, b]), lambda g: [_r(g, 3), _r(g, 2, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, build = PRIMITIVES[name]
    gen = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(TRIALS):
        worst = max(worst, *T.gradient_check(fn, build(gen), h=1e-6))
    assert worst < 1e-6, f"{name}: worst relative error {worst:.3e}"


def test_sigmoid_at_zero():
    assert T.sigmoid(torch.zeros(1, dtype=torch.float64)).item() == 0.5


def test_l1_loss_of_equal_inputs():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)
    loss = T.l1_loss(x, x.detach())
    loss.backward()
    assert loss.item() == 0.0
    assert torch.all(x.grad == 0)


def test_maxpool_idempotent_on_constant():
    x = torch.full((1, 2, 4, 6), 3.5, dtype=torch.float64)
    once = T.maxpool(x, (2, 2))
    assert torch.all(once == 3.5)
    assert torch.all(T.maxpool(once, (2, 3)) == 3.5)


def test_identity_kernel_reproduces_input():
    x = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    k = torch.zeros(3, 3, 3, 3, dtype=torch.float64)
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    assert torch.equal(T.conv(x, k, padding=1), x)


def test_conv_transpose_hits_requested_size():
    x = torch.randn(1, 2, 12, 12, dtype=torch.float64)
    k = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    assert T.conv_transpose(x, k, stride=2, output_size=(25, 25)).shape[-2:] == (25, 25)
    with pytest.raises(T.ShapeError, match="cannot reach"):
        T.conv_transpose(x, k, stride=2, output_size=(27, 27))


@pytest.mark.parametrize("call", [
    lambda: T.affine(torch.zeros(2, 3), torch.zeros(4, 5)),
    lambda: T.conv(torch.zeros(1, 2, 5, 5), torch.zeros(1, 3, 3, 3)),
    lambda: T.l1_loss(torch.zeros(3), torch.zeros(4)),
    lambda: T.maxpool(torch.zeros(1, 1, 2, 2), (3, 3)),
])
def test_shape_mismatch_names_op_and_shapes(call):
    with pytest.raises(T.ShapeError, match=r"incompatible shapes \(.*\) and \(.*\)"):
        call()


def test_debug_mode_traps_non_finite():
    x = torch.tensor([float("nan")], dtype=torch.float64)
    T.set_debug(True)
    try:
        with pytest.raises(T.NonFiniteError, match="sigmoid"):
            T.sigmoid(x)
    finally:
        T.set_debug(False)
    assert torch.isnan(T.sigmoid(x)).all()


def test_container_round_trip_is_bit_exact(tmp_path):
    arrays = {"a": np.random.default_rng(0).normal(size=(3, 4)), "b": np.arange(5, dtype=np.float32)}
    path = T.write_container(tmp_path / "c.npz", arrays, {"k": [1, 2]})
    back, meta = T.read_container(path)
    for name, value in arrays.items():
        assert back[name].dtype == value.dtype
        assert back[name].tobytes() == value.tobytes()
    assert meta == {"k": [1, 2]}
    # readable by plain numpy as well
    assert set(np.load(path).files) == {"a", "b", "__meta__"}


def test_container_bytes_depend_only_on_content(tmp_path):
    arrays = {"w": np.ones((2, 2))}
    a = T.write_container(tmp_path / "a.npz", arrays, {"x": 1})
    b = T.write_container(tmp_path / "b.npz", arrays, {"x": 1})
    assert T.file_digest(a) == T.file_digest(b)


def test_param_store_save_load(tmp_path):
    torch.manual_seed(1)
    src = torch.nn.Linear(3, 2, dtype=torch.float64)
    dst = torch.nn.Linear(3, 2, dtype=torch.float64)
    store = T.ParamStore(src)
    assert store.names() == ["weight", "bias"]
    store.save(tmp_path / "p.npz")
    T.ParamStore(dst).load(tmp_path / "p.npz")
    assert torch.equal(src.weight, dst.weight) and torch.equal(src.bias, dst.bias)
    grads = T.ParamStore(dst).grads()
    assert {n: g.shape for n, g in grads.items()} == {n: p.shape for n, p in dst.named_parameters()}


def test_param_store_rejects_wrong_shapes():
    store = T.ParamStore(torch.nn.Linear(3, 2))
    with pytest.raises(T.ShapeError):
        store.load_arrays({"weight": np.zeros((2, 4)), "bias": np.zeros(2)})
    with pytest.raises(KeyError, match="lacks"):
        store.load_arrays({"weight": np.zeros((2, 3))})


def test_relative_error_is_normwise():
    assert T.relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert T.relative_error([0.0], [0.0]) == 0.0
    assert T.relative_error([2.0, 0.0], [1.0, 0.0]) == pytest.approx(0.5)
