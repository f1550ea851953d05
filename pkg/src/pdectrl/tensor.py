"""Differentiable tensor primitives.

Thin, shape-checked functional layer over torch autograd. Every array the
rest of the package differentiates goes through these ops, in float64.
The autograd graph built by torch is the tape: ops are recorded in
execution order and ``backward`` replays them in reverse.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

_UNARY = {"tanh", "relu", "square"}
_BINARY = {"add", "sub", "mul", "scale"}


def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Convert array-like data to a float64 tensor (copying numpy input)."""
    if isinstance(data, torch.Tensor):
        t = data.to(DTYPE)
    else:
        t = torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def _is_scalar(t: torch.Tensor) -> bool:
    return t.dim() == 0 or t.numel() == 1


def elementwise(op: str, a: torch.Tensor, b: torch.Tensor | float | None = None) -> torch.Tensor:
    """Apply ``op`` elementwise.

    Binary ops accept equal shapes or a scalar operand. ``scale`` multiplies
    ``a`` by the scalar ``b``.
    """
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary, got a second operand")
        if op == "tanh":
            return torch.tanh(a)
        if op == "relu":
            return torch.relu(a)
        return a * a
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} needs two operands")
    if not isinstance(b, torch.Tensor):
        b = torch.as_tensor(b, dtype=a.dtype)
    if op == "scale" and not _is_scalar(b):
        raise ValueError(f"scale needs a scalar factor, got shape {tuple(b.shape)}")
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(
            f"shape mismatch in {op}: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x, kernel, bias, stride, padding, nd):
    spatial = x.shape[-nd:]
    if x.dim() not in (nd + 1, nd + 2):
        raise ValueError(f"conv{nd}d input must be [c,{'h,w' if nd == 2 else 'n'}] "
                         f"(optionally batched), got {tuple(x.shape)}")
    if kernel.dim() != nd + 2:
        raise ValueError(f"conv{nd}d kernel must have {nd + 2} dims, got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[-nd - 1]:
        raise ValueError(
            f"conv{nd}d channel mismatch: input {tuple(x.shape)} vs kernel {tuple(kernel.shape)}"
        )
    if any(k % 2 == 0 for k in kernel.shape[2:]):
        raise ValueError(f"kernel extents must be odd, got {tuple(kernel.shape[2:])}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {kernel.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    out = [_out_extent(n, k, stride, padding) for n, k in zip(spatial, kernel.shape[2:])]
    if any(o <= 0 for o in out):
        raise ValueError(f"non-positive output extent {out} for input {tuple(x.shape)}")


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """2D cross-correlation; ``padding`` is the zero-padding width (0 = none)."""
    _check_conv(x, kernel, bias, stride, padding, 2)
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv1d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """1D cross-correlation; same conventions as :func:`conv2d`."""
    _check_conv(x, kernel, bias, stride, padding, 1)
    return F.conv1d(x, kernel, bias, stride=stride, padding=padding)


def upsample2x(x: torch.Tensor, ndim: int = 2) -> torch.Tensor:
    """Nearest-neighbour duplication doubling each of the last ``ndim`` extents."""
    if x.dim() < ndim or any(s < 1 for s in x.shape[-ndim:]):
        raise ValueError(f"cannot upsample shape {tuple(x.shape)} over {ndim} dims")
    out = x
    for d in range(1, ndim + 1):
        out = out.repeat_interleave(2, dim=-d)
    return out


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias {tuple(bias.shape)} vs weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


class _SafeNorm(torch.autograd.Function):
    """Euclidean norm over ``dims``; zero vectors get a zero gradient."""

    @staticmethod
    def forward(ctx, a, dims):
        n = torch.sqrt(torch.sum(a * a, dim=dims))
        ctx.save_for_backward(a, n)
        ctx.dims = dims
        return n

    @staticmethod
    def backward(ctx, g):
        a, n = ctx.saved_tensors
        shape = list(n.shape) + [1] * len(ctx.dims)
        safe = torch.where(n > 0, n, torch.ones_like(n)).reshape(shape)
        scale = torch.where(n > 0, g, torch.zeros_like(g)).reshape(shape)
        return scale * a / safe, None


def l2norm(a: torch.Tensor, dims: tuple[int, ...] | None = None) -> torch.Tensor:
    """Euclidean norm; over all entries, or over trailing ``dims`` per sample."""
    if dims is None:
        dims = tuple(range(a.dim()))
    dims = tuple(sorted(d % a.dim() for d in dims)) if a.dim() else ()
    if dims and dims != tuple(range(a.dim() - len(dims), a.dim())):
        raise ValueError(f"l2norm reduces trailing dims only, got {dims}")
    return _SafeNorm.apply(a, dims)


def reduce(op: str, a: torch.Tensor) -> torch.Tensor:
    if op == "sum":
        return a.sum()
    if op == "mean":
        return a.mean()
    if op == "l2norm":
        return l2norm(a)
    raise ValueError(f"unknown reduction {op!r}")


def backward(loss: torch.Tensor, wrt):
    """Gradients of scalar ``loss`` w.r.t. the leaves in ``wrt``.

    ``wrt`` may be a single tensor, a sequence, or a name->tensor mapping; the
    result mirrors its structure. Leaves that do not influence the loss get a
    zero gradient of their own shape.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if isinstance(wrt, torch.Tensor):
        return backward(loss, [wrt])[0]
    if isinstance(wrt, Mapping):
        names = list(wrt)
        grads = backward(loss, [wrt[k] for k in names])
        return dict(zip(names, grads))
    leaves = list(wrt)
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x, eps: float = 1e-5) -> float:
    """Max relative gap between the autodiff gradient and central differences.

    Per coordinate the gap is ``|a - b| / max(1, |a|, |b|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = as_tensor(x).detach()
    xg = x0.clone().requires_grad_(True)
    auto = backward(f(xg), xg).detach().reshape(-1)
    flat = x0.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += eps
            xm[i] -= eps
            fd = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))).item() / (2 * eps)
            a = auto[i].item()
            worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()

