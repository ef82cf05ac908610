"""Softmax cross entropy against soft-label targets.

Loss per point is -sum_s target_s * log softmax(logit)_s; the returned
scalar is the mean over points so learning rates transfer across batch
sizes. The analytic gradient of that mean w.r.t. the logits is
(softmax(logits) - targets) / N, column-wise.
"""

from __future__ import annotations

import numpy as np
import torch

TARGET_TOLERANCE = 1e-4


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Loss and its gradient w.r.t. logits for (S, N) column-wise labels.

    Raises ValueError when target columns deviate from unit sum by more
    than 1e-4.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ValueError("logits and targets must both be (S, N)")
    col_sums = targets.sum(axis=0)
    if np.any(np.abs(col_sums - 1.0) > TARGET_TOLERANCE):
        raise ValueError("target columns must sum to 1 (within 1e-4)")

    n = logits.shape[1]
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_softmax = shifted - log_z
    loss = float(-(targets * log_softmax).sum() / n)
    grad = (np.exp(log_softmax) - targets) / n
    return loss, grad


def soft_cross_entropy_torch(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Torch mirror used in training; rows are points, columns markers."""
    return -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()
