"""Cross-entropy and its uncertainty-weighted variant.

The uncertainty-weighted loss scales each voxel's negative log-likelihood
by exp(-u), so voxels where the teacher was confident (u ~ 0) keep full
weight and maximally uncertain voxels (u = ln C) are down-weighted to 1/C.
Both losses are means over voxels and minimized; with u identically zero
the weighted loss reduces to plain cross-entropy exactly, bit for bit.

A probability floor of 1e-12 inside the log keeps the losses finite for
saturated predictions; it is far below every gradient-check tolerance
used in the tests.
"""

from __future__ import annotations

import torch

from .errors import ValidationError

PROB_FLOOR = 1e-12


def _check_shapes(probs: torch.Tensor, target: torch.Tensor):
    if probs.ndim != target.ndim + 1 or probs.shape[1:] != target.shape:
        raise ValidationError(
            f"probs shape {tuple(probs.shape)} does not match target {tuple(target.shape)}")


def _nll(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-voxel -ln p_y with the probability floor applied inside the log."""
    picked = probs.gather(0, target.unsqueeze(0)).squeeze(0)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over voxels of -ln p_target(v).

    ``probs`` is a (C, z, y, x) probability map, ``target`` an integer class
    map of shape (z, y, x).
    """
    _check_shapes(probs, target)
    return _nll(probs, target).mean()


def uncertainty_weight(u: torch.Tensor) -> torch.Tensor:
    """Elementwise exp(-u); equals 1 where annotations are clinically known."""
    return torch.exp(-u)


def uce_loss(probs: torch.Tensor, target: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Uncertainty-weighted cross-entropy: mean of exp(-u(v)) * (-ln p_target(v)).

    Raises on negative uncertainty. With u = 0 everywhere this equals
    :func:`cross_entropy` exactly.
    """
    _check_shapes(probs, target)
    if u.shape != target.shape:
        raise ValidationError(
            f"uncertainty shape {tuple(u.shape)} does not match target {tuple(target.shape)}")
    if bool((u < 0).any()):
        raise ValidationError("uncertainty must be non-negative")
    return (uncertainty_weight(u) * _nll(probs, target)).mean()


def grad_check_uce(logits: torch.Tensor, target: torch.Tensor, u: torch.Tensor,
                   h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    The loss under test is uce_loss(softmax(logits), target, u) as a
    function of the logits. Relative error is measured against the largest
    finite-difference gradient magnitude, so near-zero components do not
    blow up the ratio. Use double-precision logits and small volumes.
    """
    logits = logits.detach().to(torch.float64).requires_grad_(True)
    u = u.to(torch.float64)

    def f(lg: torch.Tensor) -> torch.Tensor:
        return uce_loss(torch.softmax(lg, dim=0), target, u)

    loss = f(logits)
    analytic, = torch.autograd.grad(loss, logits)

    fd = torch.zeros_like(analytic)
    flat = logits.detach().clone().reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = f(flat.reshape(logits.shape)).item()
        flat[i] = orig - h
        lo = f(flat.reshape(logits.shape)).item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * h)

    scale = fd.abs().max().clamp_min(1e-12)
    return float(((analytic - fd).abs().max() / scale).item())
