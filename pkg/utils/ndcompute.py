"""Shape-checked tensor primitives, tape-scoped gradients, Adam, and the HWMP parameter format.

Tensors are torch tensors. Every primitive validates shapes and raises a
`ShapeError` naming the op and the offending shapes; broadcasting is only
allowed for bias addition. While a `Tape` is active and gradients are
enabled, each primitive appends an entry to it, so a training step can be
inspected op by op. The tape is an inspection record only: gradients always
come from torch's reverse-mode autograd, and `backward` just logs the tape
length when one is passed.
"""

import contextvars
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from utils.dataset import ByteReader
from utils.errors import DatasetError, MissingFileError, NotScalarError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor
Params = Union[Mapping[str, Tensor], Sequence[Tensor]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("ndcompute_tape", default=None)


@dataclass(frozen=True)
class TapeEntry:
    index: int
    op: str
    input_shapes: Tuple[Tuple[int, ...], ...]
    output_shape: Tuple[int, ...]


class Tape:
    """Ordered record of the primitives run while the tape is active"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor) -> None:
        shapes = tuple(tuple(t.shape) for t in inputs if isinstance(t, Tensor))
        self.entries.append(TapeEntry(len(self.entries), op, shapes, tuple(output.shape)))

    def ops(self) -> List[str]:
        return [entry.op for entry in self.entries]

    def backward(self, loss: Tensor, params: Params) -> Dict[str, Tensor]:
        return backward(self, loss, params)


def _record(op: str, inputs: Sequence, output: Tensor) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and torch.is_grad_enabled() and output.requires_grad:
        tape.record(op, inputs, output)
    return output


def _shape(t) -> Tuple[int, ...]:
    return tuple(t.shape) if isinstance(t, Tensor) else ()


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.dim() > 2 and b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _record("matmul", (a, b), torch.matmul(a, b))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T (+ bias) over the last dimension; weight is (out, in)"""
    if weight.dim() != 2 or x.dim() < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = matmul(x, weight.t())
    return out if bias is None else add(out, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError("conv2d", weight.shape, bias.shape)
    out_h = (x.shape[2] + 2 * padding - weight.shape[2]) // stride + 1
    out_w = (x.shape[3] + 2 * padding - weight.shape[3]) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    return _record("conv2d", (x, weight, bias), F.conv2d(x, weight, bias, stride=stride, padding=padding))


def relu(x: Tensor) -> Tensor:
    return _record("relu", (x,), torch.relu(x))


def tanh(x: Tensor) -> Tensor:
    return _record("tanh", (x,), torch.tanh(x))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be a bias vector matching a's last dimension"""
    same = a.shape == b.shape
    bias = b.dim() == 1 and a.dim() >= 1 and b.shape[0] == a.shape[-1]
    if not (same or bias):
        raise ShapeError("add", a.shape, b.shape)
    return _record("add", (a, b), a + b)


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Elementwise product with a same-shape tensor or a scalar"""
    if isinstance(b, Tensor) and b.dim() > 0 and a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _record("mul", (a, b), a * b)


def mean(x: Tensor, dim: Optional[int] = None) -> Tensor:
    if dim is not None and not -x.dim() <= dim < max(x.dim(), 1):
        raise ShapeError("mean", x.shape, (dim,))
    out = x.mean() if dim is None else x.mean(dim=dim)
    return _record("mean", (x,), out)


def l1_norm(x: Tensor) -> Tensor:
    """Per-row L1 norm over the last dimension"""
    if x.dim() == 0:
        return _record("l1_norm", (x,), x.abs())
    return _record("l1_norm", (x,), x.abs().sum(dim=-1))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over leading dimensions of the L1 norm over the last dimension"""
    if pred.shape != target.shape:
        raise ShapeError("l1_loss", pred.shape, target.shape)
    diff = (pred - target).abs()
    out = diff if diff.dim() == 0 else diff.sum(dim=-1).mean()
    return _record("l1_loss", (pred, target), out)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    return _record("mse_loss", (pred, target), F.mse_loss(pred, target))


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", ())
    ref = tensors[0]
    if ref.dim() == 0 or not -ref.dim() <= dim < ref.dim():
        raise ShapeError("concat", ref.shape)
    axis = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != axis):
            raise ShapeError("concat", ref.shape, t.shape)
    return _record("concat", tuple(tensors), torch.cat(list(tensors), dim=dim))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.numel():
        raise ShapeError("reshape", x.shape, shape)
    return _record("reshape", (x,), x.reshape(shape))


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def feature_std(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-dimension unbiased std over the batch axis of a (B, D) tensor"""
    if x.dim() != 2 or x.shape[0] < 2:
        raise ShapeError("feature_std", x.shape)
    return _record("feature_std", (x,), torch.sqrt(x.var(dim=0, unbiased=True) + eps))


def feature_cov(x: Tensor) -> Tensor:
    """(D, D) unbiased covariance of a (B, D) batch"""
    if x.dim() != 2 or x.shape[0] < 2:
        raise ShapeError("feature_cov", x.shape)
    centered = x - x.mean(dim=0, keepdim=True)
    return _record("feature_cov", (x,), centered.T @ centered / (x.shape[0] - 1))


def off_diagonal(m: Tensor) -> Tensor:
    if m.dim() != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ShapeError("off_diagonal", m.shape)
    n = m.shape[0]
    return m.flatten()[:-1].view(n - 1, n + 1)[:, 1:].flatten()


# -- gradients ----------------------------------------------------------------


def _named(params: Params) -> "OrderedDict[str, Tensor]":
    if isinstance(params, Mapping):
        return OrderedDict(params)
    return OrderedDict((str(i), p) for i, p in enumerate(params))


def backward(tape: Optional[Tape], loss: Tensor, params: Params) -> Dict[str, Tensor]:
    """Gradients of a scalar loss w.r.t. each parameter; the graph is kept so repeated calls agree"""
    if loss.numel() != 1:
        raise NotScalarError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    named = _named(params)
    tensors = list(named.values())
    grads = torch.autograd.grad(loss.reshape(()), tensors, retain_graph=True, allow_unused=True)
    out = OrderedDict()
    for (name, p), g in zip(named.items(), grads):
        out[name] = torch.zeros_like(p) if g is None else g
    if tape is not None:
        logger.debug("backward over %d recorded ops, %d parameters", len(tape), len(out))
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
              rtol: float = 1e-3, atol: float = 1e-6) -> bool:
    """Central finite differences against autograd, in float64"""
    inputs64 = tuple(t.detach().to(torch.float64).requires_grad_(True) for t in inputs)
    return torch.autograd.gradcheck(fn, inputs64, eps=eps, atol=atol, rtol=rtol, raise_exception=False)


# -- optimizer ----------------------------------------------------------------


class OptimizerState:
    """Adam moments, step counter and hyperparameters for a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.018,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps, foreach=False)

    def moments(self) -> List[Tuple[Tensor, Tensor]]:
        out = []
        for p in self.params:
            state = self.optimizer.state.get(p, {})
            out.append((state.get("exp_avg", torch.zeros_like(p)), state.get("exp_avg_sq", torch.zeros_like(p))))
        return out


def adam_step(params: Params, grads: Params, state: OptimizerState):
    """Bias-corrected Adam update, in place; returns (params, state)"""
    param_list = list(_named(params).values())
    grad_list = list(_named(grads).values())
    if len(param_list) != len(grad_list) or len(param_list) != len(state.params):
        raise ShapeError("adam_step", (len(param_list),), (len(grad_list),))
    for p, tracked, g in zip(param_list, state.params, grad_list):
        if p is not tracked:
            raise ValueError("adam_step parameters differ from the ones the optimizer state tracks")
        if p.shape != g.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    return params, state


# -- HWMP parameter files -----------------------------------------------------

PARAM_MAGIC = b"HWMP"
PARAM_VERSION = 1
_PARAM_HEADER = struct.Struct("<4sHI")


def save_parameters(path: str, named: Mapping[str, Tensor]) -> None:
    """Versioned header, then (name, shape, raw little-endian float32) records"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PARAM_HEADER.pack(PARAM_MAGIC, PARAM_VERSION, len(named)))
        for name, tensor in named.items():
            data = tensor.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def load_parameters(path: str) -> "OrderedDict[str, Tensor]":
    if not os.path.exists(path):
        raise MissingFileError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    reader = ByteReader(raw, path)
    magic, version, count = reader.unpack(_PARAM_HEADER)
    if magic != PARAM_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != PARAM_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        name = reader.string()
        (ndim,) = reader.unpack(struct.Struct("<B"))
        shape = reader.unpack(struct.Struct(f"<{ndim}I")) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape)
        out[name] = torch.from_numpy(values.astype(np.float32))
    if reader.remaining:
        raise DatasetError(f"{path}: {reader.remaining} trailing bytes")
    return out
