"""Central finite-difference gradient checking in double precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

STEP = 1e-5


@dataclass
class GradCheck:
    name: str
    analytic: torch.Tensor
    numeric: torch.Tensor

    @property
    def rel_error(self) -> float:
        """``|a - n| / (|a| + |n|)`` over the flattened gradients; 0 when both vanish."""
        num = torch.linalg.vector_norm(self.analytic - self.numeric)
        den = torch.linalg.vector_norm(self.analytic) + torch.linalg.vector_norm(self.numeric)
        return 0.0 if den == 0 else float(num / den)


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, step: float = STEP) -> torch.Tensor:
    """Perturb ``x`` in place, one element at a time, and difference ``fn()``."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            g[i] = (plus - minus) / (2 * step)
    return grad


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Sequence[tuple[str, torch.Tensor]],
                    step: float = STEP) -> list[GradCheck]:
    """Compare autograd against finite differences for each named tensor.

    ``fn`` must be deterministic and return a scalar built from the tensors
    (for modules: use eval-mode batch-norm or a fixed batch, no dropout).
    """
    for _, t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("gradient checks run in double precision")
        t.grad = None
        t.requires_grad_(True)
    out = fn()
    if out.dim() != 0:
        raise ValueError("fn must return a scalar")
    analytic = torch.autograd.grad(out, [t for _, t in tensors], allow_unused=True)
    results = []
    for (name, t), a in zip(tensors, analytic):
        a = torch.zeros_like(t) if a is None else a.detach()
        results.append(GradCheck(name, a, numeric_grad(fn, t, step)))
    return results


def module_tensors(module: torch.nn.Module, prefix: str = "") -> list[tuple[str, torch.Tensor]]:
    return [(prefix + n, p) for n, p in module.named_parameters()]


def max_rel_error(results: Sequence[GradCheck]) -> float:
    return max((r.rel_error for r in results), default=0.0)
