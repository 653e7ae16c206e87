"""Numeric substrate: layer primitives, gradient checking and parameter files.

Reverse-mode gradients come from torch autograd; this module adds the shape
contract every model layer relies on (mismatches raise :class:`ShapeError`
naming the op and both shapes), an optional non-finite trap, and an
independent central finite-difference oracle.

Container files are ordinary ``.npz`` archives (readable by ``numpy.load``)
written with fixed zip timestamps so identical content gives identical bytes.
Entry ``__meta__`` holds a JSON document; every other entry is a named array.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

META_KEY = "__meta__"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

DEBUG = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Enable the non-finite check after every primitive."""
    global DEBUG
    DEBUG = bool(flag)


def _checked(op: str, out: torch.Tensor) -> torch.Tensor:
    if DEBUG and not torch.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _mismatch(op: str, a, b, detail: str = "") -> ShapeError:
    extra = f" ({detail})" if detail else ""
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}{extra}")


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise _mismatch("affine", x.shape, weight.shape, "x[..., in] vs W[out, in]")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _mismatch("affine", weight.shape, bias.shape, "bias must be [out]")
    return _checked("affine", F.linear(x, weight, bias))


def _conv_dims(op: str, x: torch.Tensor, kernel: torch.Tensor, channel_axis: int) -> int:
    nd = kernel.dim() - 2
    if nd not in (1, 2, 3) or x.dim() != nd + 2:
        raise _mismatch(op, x.shape, kernel.shape, f"input needs {kernel.dim()} dims")
    if x.shape[1] != kernel.shape[channel_axis]:
        raise _mismatch(op, x.shape, kernel.shape, "input channels")
    return nd


def conv(x, kernel, bias=None, stride=1, padding=0) -> torch.Tensor:
    """N-d cross-correlation; ``kernel`` is (out, in, *window), ``x`` is (B, in, *space)."""
    nd = _conv_dims("conv", x, kernel, 1)
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise _mismatch("conv", kernel.shape, bias.shape, "bias must be [out]")
    fn = (F.conv1d, F.conv2d, F.conv3d)[nd - 1]
    padded = [s + 2 * p for s, p in zip(x.shape[2:], _tuple(padding, nd))]
    if any(w > s for w, s in zip(kernel.shape[2:], padded)):
        raise _mismatch("conv", x.shape, kernel.shape, "kernel larger than padded input")
    return _checked("conv", fn(x, kernel, bias, stride=stride, padding=padding))


def conv_transpose(x, kernel, bias=None, stride=1, padding=0, output_size=None) -> torch.Tensor:
    """Transposed convolution; ``kernel`` is (in, out, *window).

    ``output_size`` (spatial dims only) picks the output padding needed to hit
    an exact size, which is how odd sizes lost to floor pooling are restored.
    """
    nd = _conv_dims("conv_transpose", x, kernel, 0)
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise _mismatch("conv_transpose", kernel.shape, bias.shape, "bias must be [out]")
    strides, pads = _tuple(stride, nd), _tuple(padding, nd)
    base = [
        (n - 1) * s - 2 * p + k
        for n, s, p, k in zip(x.shape[2:], strides, pads, kernel.shape[2:])
    ]
    out_pad = [0] * nd
    if output_size is not None:
        want = tuple(output_size)[-nd:]
        out_pad = [w - b for w, b in zip(want, base)]
        if any(op < 0 or (op > 0 and op >= s) for op, s in zip(out_pad, strides)):
            raise _mismatch("conv_transpose", x.shape, want, f"cannot reach output size from {base}")
    fn = (F.conv_transpose1d, F.conv_transpose2d, F.conv_transpose3d)[nd - 1]
    return _checked(
        "conv_transpose",
        fn(x, kernel, bias, stride=strides, padding=pads, output_padding=tuple(out_pad)),
    )


def maxpool(x: torch.Tensor, window, stride=None) -> torch.Tensor:
    """Max pooling with floor semantics over the trailing ``len(window)`` dims."""
    window = tuple(window) if isinstance(window, Sequence) else (window,) * (x.dim() - 2)
    nd = len(window)
    if x.dim() != nd + 2:
        raise _mismatch("maxpool", x.shape, window, "window rank")
    if any(w > s for w, s in zip(window, x.shape[2:])):
        raise _mismatch("maxpool", x.shape, window, "window larger than input")
    fn = (F.max_pool1d, F.max_pool2d, F.max_pool3d)[nd - 1]
    return _checked("maxpool", fn(x, window, stride if stride is not None else window))


def sigmoid(x):
    return _checked("sigmoid", torch.sigmoid(x))


def tanh(x):
    return _checked("tanh", torch.tanh(x))


def relu(x):
    return _checked("relu", F.relu(x))


def leaky_relu(x, slope: float = 0.01):
    return _checked("leaky_relu", F.leaky_relu(x, slope))


def l1_loss(a: torch.Tensor, b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if a.shape != b.shape:
        raise _mismatch("l1_loss", a.shape, b.shape)
    return _checked("l1_loss", F.l1_loss(a, b, reduction=reduction))


def l2_penalty(params: Iterable[torch.Tensor]) -> torch.Tensor:
    """Sum of squared entries over ``params``."""
    total = None
    for p in params:
        term = (p * p).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return _checked("l2_penalty", total)


def _tuple(v, n: int) -> tuple:
    return tuple(v) if isinstance(v, Sequence) else (v,) * n


# -- gradient checking -------------------------------------------------------


def finite_difference_grad(
    fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-6,
    index: int = 0, entries: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``.

    Only flat ``entries`` are perturbed when given (others are returned as 0).
    Evaluation runs without autograd on float64 copies.
    """
    base = [t.detach().to(torch.float64).clone() for t in inputs]
    target = base[index]
    flat = target.view(-1)
    grad = np.zeros(flat.numel())
    todo = range(flat.numel()) if entries is None else entries
    with torch.no_grad():
        for k in todo:
            orig = flat[k].item()
            flat[k] = orig + h
            up = float(fn(*base))
            flat[k] = orig - h
            down = float(fn(*base))
            flat[k] = orig
            grad[k] = (up - down) / (2.0 * h)
    return grad.reshape(tuple(target.shape))


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradient_check(fn, inputs: Sequence[torch.Tensor], h: float = 1e-6) -> list[float]:
    """Relative error of autograd vs finite differences for every input tensor."""
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    errors = []
    for i, g in enumerate(grads):
        analytic = np.zeros(tuple(leaves[i].shape)) if g is None else g.detach().double().numpy()
        numeric = finite_difference_grad(fn, inputs, h=h, index=i)
        errors.append(relative_error(analytic, numeric))
    return errors


def module_gradient_pairs(
    loss_fn: Callable[[], torch.Tensor], module: torch.nn.Module, h: float = 1e-6,
    fraction: float = 1.0, seed: int = 0, names: Iterable[str] | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Analytic and central-difference gradients for a module's parameters.

    ``fraction`` < 1 samples that share of each tensor's entries (at least one).
    The analytic gradient is taken at the module's own dtype; the finite
    differences run on a float64 copy of the parameters. Returns
    ``name -> (analytic, numeric)`` over the sampled entries.
    """
    params = OrderedDict(module.named_parameters())
    if names is not None:
        params = OrderedDict((n, params[n]) for n in names)
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {n: (p.grad.detach().double().clone() if p.grad is not None else torch.zeros_like(p, dtype=torch.float64))
                for n, p in params.items()}
    module.zero_grad(set_to_none=True)

    orig_dtype = next(module.parameters()).dtype
    module.double()
    rng = np.random.default_rng(seed)
    pairs = {}
    current = dict(module.named_parameters())
    with torch.no_grad():
        for name in params:
            p = current[name]
            flat = p.data.view(-1)
            count = flat.numel()
            take = count if fraction >= 1.0 else max(1, int(round(fraction * count)))
            idx = np.sort(rng.choice(count, size=take, replace=False)) if take < count else np.arange(count)
            numeric = np.empty(take)
            for j, k in enumerate(idx):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(loss_fn())
                flat[k] = orig - h
                down = float(loss_fn())
                flat[k] = orig
                numeric[j] = (up - down) / (2.0 * h)
            pairs[name] = (analytic[name].view(-1).numpy()[idx], numeric)
    module.to(orig_dtype)
    return pairs


def module_gradient_check(
    loss_fn: Callable[[], torch.Tensor], module: torch.nn.Module, h: float = 1e-6,
    fraction: float = 1.0, seed: int = 0, names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Per-tensor relative error of :func:`module_gradient_pairs`."""
    pairs = module_gradient_pairs(loss_fn, module, h, fraction, seed, names)
    return {name: relative_error(a, n) for name, (a, n) in pairs.items()}


def pooled_error(pairs: dict) -> float:
    """One relative error over all sampled entries of all tensors."""
    a = np.concatenate([a for a, _ in pairs.values()])
    n = np.concatenate([n for _, n in pairs.values()])
    return relative_error(a, n)


# -- container files ---------------------------------------------------------


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    """Write named arrays plus JSON metadata; byte-stable for equal content."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        items = list(arrays.items())
        if meta is not None:
            items.append((META_KEY, np.array(json.dumps(meta, sort_keys=True))))
        for name, arr in items:
            buf = io.BytesIO()
            arr = np.asarray(arr)
            arr = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)  # keeps 0-d shape
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != META_KEY}
        meta = json.loads(str(data[META_KEY])) if META_KEY in data.files else {}
    return arrays, meta


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class ParamStore:
    """Named parameters of a module with their gradient slots."""

    def __init__(self, module: torch.nn.Module):
        self.module = module

    def names(self) -> list[str]:
        return [n for n, _ in self.module.named_parameters()]

    def params(self) -> "OrderedDict[str, torch.nn.Parameter]":
        return OrderedDict(self.module.named_parameters())

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                for n, p in self.module.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = torch.zeros_like(p)

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.detach().cpu().numpy().copy()) for n, t in self.module.state_dict().items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        own = self.module.state_dict()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"parameter file lacks {missing}")
        for name, ref in own.items():
            if tuple(arrays[name].shape) != tuple(ref.shape):
                raise _mismatch("load_arrays", ref.shape, arrays[name].shape, name)
        self.module.load_state_dict(
            {n: torch.from_numpy(np.array(arrays[n])).to(own[n].dtype) for n in own}
        )

    def save(self, path, meta: Mapping | None = None) -> Path:
        return write_container(path, self.to_arrays(), meta)

    def load(self, path) -> dict:
        arrays, meta = read_container(path)
        self.load_arrays(arrays)
        return meta
