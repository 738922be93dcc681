"""Shared independent oracles for the test suite.

Everything here is deliberately brute-force and kept independent of the
library code paths it checks.
"""

from __future__ import annotations

import itertools

import numpy as np
import torch


def brute_force_two_means(points: np.ndarray):
    """Exact 2-means optimum by enumerating every nonempty 2-partition.

    Returns (objective, labels). Only feasible for small N.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    best_obj, best_labels = np.inf, None
    for bits in range(1, 2**n - 1):
        labels = np.array([(bits >> i) & 1 for i in range(n)])
        obj = 0.0
        for j in (0, 1):
            members = points[labels == j]
            mu = members.mean(axis=0)
            obj += float(((members - mu) ** 2).sum())
        if obj < best_obj:
            best_obj, best_labels = obj, labels
    return best_obj, best_labels


def confusion_f1(pred: np.ndarray, true: np.ndarray, num_classes: int):
    """Per-class F1 from an explicitly counted confusion matrix."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        if tp == 0 and fp == 0 and fn == 0:
            scores.append(1.0)
        else:
            scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return scores


def finite_difference_gradient(loss_fn, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar loss w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = h * max(1.0, abs(orig))
        with torch.no_grad():
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_gradient_error(loss_fn, tensors) -> float:
    """Max relative disagreement between autograd and finite differences."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    worst = 0.0
    for tensor, analytic in zip(tensors, grads):
        numeric = finite_difference_gradient(loss_fn, tensor)
        num = (analytic - numeric).abs()
        den = torch.clamp(analytic.abs() + numeric.abs(), min=1e-6)
        worst = max(worst, float((num / den).max()))
    return worst


def random_row_stochastic(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    q = rng.uniform(0.01, 1.0, size=(n, k))
    return q / q.sum(axis=1, keepdims=True)


def nudge_parameters(net, seed: int, scale: float = 0.05) -> None:
    """Move every parameter to a generic point before a finite-difference check.

    Freshly initialized biases are exactly zero, which parks activations with
    dead receptive fields exactly on the ReLU kink; central differences then
    straddle the kink and disagree with the one-sided autograd derivative.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p += scale * (2 * torch.rand(p.shape, generator=gen, dtype=p.dtype) - 1)
