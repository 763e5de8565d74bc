# cch/diff_engine.py
"""
Reverse-mode differentiation for the pipeline, on top of torch autograd.

A DiffTensor is a float64 torch.Tensor. Trainable parameters are leaves with
requires_grad=True; designated inputs (e.g. real image pixels for R1) are
leaves too. Rendering runs tape-free under torch.no_grad().

Operation set used by the pipeline (nothing else is relied on):
    affine (linear / matmul / einsum), sin, sigmoid, exp, log, softplus,
    softmax, elementwise + - * /, sum / mean / prod / cumprod reductions,
    concatenation / stacking / indexing, 2D convolution, leaky-rectifier.
All of them support differentiating through an input-gradient (create_graph),
which the R1 penalty relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from utils.errors import InvalidInputError, NumericError

DTYPE = torch.float64
DiffTensor = Tensor

SUPPORTED_OPS = (
    "affine", "sin", "sigmoid", "exp", "log", "softplus", "softmax", "add", "sub", "mul",
    "div", "sum", "mean", "prod", "cumprod", "cat", "stack", "index", "conv2d", "leaky_relu",
)


def as_tensor(values: Union[Tensor, Sequence, np.ndarray, float]) -> Tensor:
    """Float64 view of the values; tensors keep their graph."""
    if isinstance(values, Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def require_finite(value: Tensor, what: str, *, part: Optional[int] = None) -> None:
    if not bool(torch.isfinite(value).all()):
        if part is None:
            raise InvalidInputError(f"{what} contains non-finite values")
        raise NumericError(f"{what} is non-finite", part=part)


def backward(loss: Tensor, *, retain_graph: bool = False) -> None:
    """Populate .grad on every leaf reachable from a scalar loss (accumulating)."""
    if loss.numel() != 1:
        raise InvalidInputError(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward(retain_graph=retain_graph)


def input_gradient(output: Tensor, inputs: Tensor, *, create_graph: bool = True) -> Tensor:
    """∇_inputs Σ output, kept differentiable so a penalty on it can be trained."""
    (grad,) = torch.autograd.grad(output.sum(), inputs, create_graph=create_graph)
    return grad


# ---------------- Gradient checking ---------------- #


@dataclass
class BlockReport:
    name: str
    max_rel_error: float = 0.0
    worst_index: Tuple[int, ...] = ()
    analytic: float = 0.0
    numeric: float = 0.0
    probes: int = 0


@dataclass
class GradcheckReport:
    tol: float = 1e-4
    blocks: Dict[str, BlockReport] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks.values()), default=0.0)

    @property
    def worst(self) -> Optional[BlockReport]:
        if not self.blocks:
            return None
        return max(self.blocks.values(), key=lambda b: b.max_rel_error)

    def passed(self, tol: Optional[float] = None) -> bool:
        return self.max_rel_error <= (self.tol if tol is None else tol)

    def lines(self) -> List[str]:
        out = []
        for b in self.blocks.values():
            out.append(f"{b.name}: max_rel_error={b.max_rel_error:.3e} at {list(b.worst_index)} "
                       f"(analytic={b.analytic:.6e}, numeric={b.numeric:.6e}, probes={b.probes})")
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients meaningful."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(fn: Callable[[], Tensor],
              blocks: Mapping[str, Tensor],
              probes: int = 50,
              h: float = 1e-5,
              tol: float = 1e-4,
              seed: int = 0) -> GradcheckReport:
    """
    Compare autograd against central differences at `probes` random coordinates.

    fn: closure returning a scalar that reads the tensors in `blocks`.
    blocks: name -> leaf tensor (requires_grad) that is perturbed in place.
    Probes are spread over blocks in proportion to their size, at least one each,
    and drawn from a PCG64 generator seeded with `seed`.
    """
    names = list(blocks)
    if not names:
        return GradcheckReport(tol=tol)
    for t in blocks.values():
        t.grad = None
    loss = fn()
    if loss.numel() != 1:
        raise InvalidInputError("gradcheck needs a scalar-valued function")
    leaves = [blocks[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)

    rng = np.random.default_rng(seed)
    sizes = np.array([blocks[n].numel() for n in names], dtype=np.float64)
    share = np.maximum(1, np.floor(probes * sizes / sizes.sum())).astype(int)

    report = GradcheckReport(tol=tol)
    for name, leaf, grad, count in zip(names, leaves, grads, share):
        block = BlockReport(name=name)
        flat_grad = torch.zeros_like(leaf).reshape(-1) if grad is None else grad.reshape(-1)
        picks = rng.choice(leaf.numel(), size=min(int(count), leaf.numel()), replace=False)
        for flat in picks:
            flat = int(flat)
            numeric = _central_difference(fn, leaf, flat, h)
            analytic = float(flat_grad[flat])
            err = relative_error(analytic, numeric)
            block.probes += 1
            if err >= block.max_rel_error:
                block.max_rel_error = err
                block.worst_index = tuple(int(i) for i in np.unravel_index(flat, tuple(leaf.shape)))
                block.analytic = analytic
                block.numeric = numeric
        report.blocks[name] = block
    return report


def _central_difference(fn: Callable[[], Tensor], leaf: Tensor, flat: int, h: float) -> float:
    view = leaf.data.reshape(-1)
    original = float(view[flat])
    # fn may itself take input-gradients (R1, eikonal), so it runs with the tape on
    view[flat] = original + h
    plus = float(fn().detach())
    view[flat] = original - h
    minus = float(fn().detach())
    view[flat] = original
    value = (plus - minus) / (2.0 * h)
    if not math.isfinite(value):
        raise NumericError("finite-difference probe produced a non-finite value")
    return value
