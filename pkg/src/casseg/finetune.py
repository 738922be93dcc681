"""Few-shot fine-tuning with pixel-wise cross-entropy.

Pretrained weights transfer into the skip-enabled segmentation network (the
head is re-initialized, everything stays trainable); ``init_mode="scratch"``
trains the same network from random init instead, realizing the
labeled-data-only baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .network import (
    EncoderDecoder,
    HEAD_SEGMENTATION,
    NetworkConfig,
    init_network,
    to_segmentation,
)
from .pretrain import DivergenceError, _check_finite

INIT_PRETRAINED = "pretrained"
INIT_SCRATCH = "scratch"


@dataclass
class FinetuneConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    init_mode: str = INIT_PRETRAINED

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.init_mode not in (INIT_PRETRAINED, INIT_SCRATCH):
            raise ValueError(f"init_mode must be pretrained or scratch, got {self.init_mode!r}")


def pixel_cross_entropy(pred: np.ndarray, masks) -> float:
    """Mean over all pixels of -log(predicted probability of the true class).

    ``pred`` holds per-pixel class probabilities, (B, H, W, L); ``masks`` is a
    (B, H, W) integer array or an iterable of LabelMask.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = _mask_array(masks)
    if pred.ndim != 4 or pred.shape[:3] != labels.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs masks {labels.shape}")
    b, h, w = labels.shape
    picked = np.take_along_axis(pred, labels[..., None].astype(np.int64), axis=-1)[..., 0]
    return float(-np.log(picked).sum() / (b * h * w))


def _mask_array(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        return masks
    return np.stack([m.labels if hasattr(m, "labels") else np.asarray(m) for m in masks], axis=0)


def _patch_array(patches) -> np.ndarray:
    if isinstance(patches, np.ndarray):
        return patches
    return np.stack([p.pixels if hasattr(p, "pixels") else np.asarray(p) for p in patches], axis=0)


def finetune_train(params_init: EncoderDecoder | None, labeled, net_cfg: NetworkConfig, ft_cfg: FinetuneConfig):
    """Train the segmentation network on labeled patches.

    ``init_mode="pretrained"`` transfers ``params_init`` (skips reattached,
    fresh head, no layer freezing); ``"scratch"`` ignores ``params_init`` and
    initializes everything from the fine-tune seed. Returns (network, history).
    """
    ft_cfg.validate()
    labeled = list(labeled)
    if not labeled:
        raise ValueError("labeled set is empty")
    if ft_cfg.init_mode == INIT_PRETRAINED:
        if params_init is None:
            raise ValueError("init_mode=pretrained requires pretrained params")
        net = to_segmentation(params_init, seed=ft_cfg.seed)
    else:
        seg_cfg = replace(net_cfg, use_skips=True, head=HEAD_SEGMENTATION)
        net = init_network(seg_cfg, seed=ft_cfg.seed)

    pixels = np.stack([p.pixels for p, _ in labeled], axis=0)
    data = torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2)))
    targets = torch.from_numpy(np.stack([m.labels for _, m in labeled], axis=0).astype(np.int64))

    rng = np.random.default_rng(np.random.SeedSequence([ft_cfg.seed, 3]))
    # Adam here: fixed-lr SGD either freezes or blows up on unlucky inits at
    # these widths; the plain-SGD convention is kept for pretraining only
    opt = torch.optim.Adam(net.parameters(), lr=ft_cfg.learning_rate)
    n = data.shape[0]
    history = []
    for epoch in range(ft_cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, ft_cfg.batch_size):
            idx = order[start : start + ft_cfg.batch_size]
            # cross_entropy on logits equals the pixel-mean -log p contract value
            loss = F.cross_entropy(net.logits_t(data[idx]), targets[idx])
            loss_val = float(loss.detach())
            _check_finite(loss_val, f"fine-tuning epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss_val)
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return net, history


def predict_masks(net: EncoderDecoder, patches, batch_size: int = 16) -> np.ndarray:
    """Per-pixel argmax class ids, (N, H, W); probability ties go to the
    smallest class id.

    Inputs whose H or W is not divisible by the pooling factor are
    reflect-padded and the prediction cropped back.
    """
    if net.config.head != HEAD_SEGMENTATION:
        raise ValueError("head mismatch: predict_masks needs a segmentation head")
    pixels = _patch_array(patches).astype(np.float32)
    n, h, w, _ = pixels.shape
    f = net.config.pool_factor
    pad_h, pad_w = (-h) % f, (-w) % f
    if pad_h or pad_w:
        pixels = np.pad(pixels, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    out = np.empty((n, h, w), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            xb = torch.from_numpy(np.ascontiguousarray(pixels[start : start + batch_size].transpose(0, 3, 1, 2)))
            probs = net.segment_t(xb)
            out[start : start + batch_size] = probs.argmax(dim=1).numpy()[:, :h, :w]
    return out
