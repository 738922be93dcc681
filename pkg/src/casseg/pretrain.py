"""Two-phase self-supervised pretraining.

Phase 1 trains the skipless encoder-decoder to reconstruct its input
(per-sample squared L2, batch mean). KMeans over the pooled embeddings then
seeds K centroids. Phase 2 alternates an E step (recompute soft assignments Q
over the whole pool and refresh the sharpened target P every
``target_update_interval`` optimizer steps) with M steps of gradient descent
on the combined KL + lambda * reconstruction objective, jointly over network
weights and centroids, until assignment churn drops below ``stop_delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .dataio import PatchDataset
from .network import EncoderDecoder, HEAD_RECONSTRUCTION, NetworkConfig, init_network

KMEANS_MAX_ITER = 300
CENTROID_COLLAPSE_TOL = 1e-8


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class DegenerateClusteringError(RuntimeError):
    """Centroids collapsed onto each other during phase 2."""


@dataclass
class ClusterState:
    """K centroids in embedding space plus the Student-t degree of freedom."""

    centroids: np.ndarray  # (K, D)
    alpha: float = 1.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids)
        if self.centroids.ndim != 2:
            raise ValueError(f"centroids: expected (K, D), got shape {self.centroids.shape}")
        if not (self.alpha > 0):
            raise ValueError(f"alpha: must be > 0, got {self.alpha}")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError(f"k: need at least 2 clusters, got {self.k}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids: non-finite values")
        if _min_pairwise_distance(self.centroids) <= 0:
            raise ValueError("centroids: two centroids coincide")


@dataclass
class PretrainConfig:
    phase1_epochs: int = 30
    phase2_epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-6
    phase2_learning_rate: float | None = None  # None -> learning_rate
    momentum: float = 0.9
    centroid_learning_rate: float = 0.05
    lam: float = 0.1  # weight of the reconstruction term in the phase-2 loss
    k: int | None = None  # None -> 2 * num_classes, resolved by the caller
    target_update_interval: int | None = 100  # None -> single target refresh
    stop_delta: float = 0.001
    kmeans_restarts: int = 10
    seed: int = 0

    @property
    def phase2_lr(self) -> float:
        return self.learning_rate if self.phase2_learning_rate is None else self.phase2_learning_rate

    def validate(self) -> None:
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.phase2_learning_rate is not None and not (self.phase2_learning_rate > 0):
            raise ValueError(f"phase2_learning_rate must be > 0, got {self.phase2_learning_rate}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.k is not None and self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.target_update_interval is not None and self.target_update_interval < 1:
            raise ValueError("target_update_interval must be >= 1 or None")
        if not (0 < self.stop_delta <= 1):
            raise ValueError(f"stop_delta must be in (0, 1], got {self.stop_delta}")
        if self.kmeans_restarts < 1:
            raise ValueError(f"kmeans_restarts must be >= 1, got {self.kmeans_restarts}")


# ---------------------------------------------------------------------------
# Loss and assignment primitives (torch forms carry gradients; the ndarray
# wrappers are the public, double-precision surface).
# ---------------------------------------------------------------------------


def reconstruction_loss_t(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(target.shape)}")
    return (output - target).pow(2).reshape(output.shape[0], -1).sum(dim=1).mean()


def soft_assign_t(z: torch.Tensor, centroids: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Student-t soft assignment: q_ij ~ (1 + |z_i - m_j|^2 / alpha)^(-(alpha+1)/2)."""
    if z.shape[1] != centroids.shape[1]:
        raise ValueError(f"dimension mismatch: embeddings D={z.shape[1]}, centroids D={centroids.shape[1]}")
    d2 = (z.unsqueeze(1) - centroids.unsqueeze(0)).pow(2).sum(dim=2)
    kernel = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    return kernel / kernel.sum(dim=1, keepdim=True)


def target_distribution_t(q: torch.Tensor) -> torch.Tensor:
    """Sharpened, frequency-normalized targets: p_ij ~ q_ij^2 / sum_i q_ij."""
    weight = q.pow(2) / q.sum(dim=0, keepdim=True)
    return weight / weight.sum(dim=1, keepdim=True)


def kl_loss_t(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return torch.special.xlogy(p, p / q).sum(dim=1).mean()


def reconstruction_loss(output: np.ndarray, target: np.ndarray) -> float:
    """Mean over the batch of per-sample squared L2 reconstruction error."""
    out = torch.as_tensor(np.asarray(output), dtype=torch.float64)
    tgt = torch.as_tensor(np.asarray(target), dtype=torch.float64)
    return float(reconstruction_loss_t(out, tgt))


def soft_assign(embeddings: np.ndarray, cs: ClusterState) -> np.ndarray:
    """Row-stochastic (N, K) soft assignment of embeddings to centroids."""
    z = torch.as_tensor(np.asarray(embeddings), dtype=torch.float64)
    m = torch.as_tensor(np.asarray(cs.centroids), dtype=torch.float64)
    return soft_assign_t(z, m, cs.alpha).numpy()


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Row-stochastic (N, K) training target derived from Q."""
    qt = torch.as_tensor(np.asarray(q), dtype=torch.float64)
    return target_distribution_t(qt).numpy()


def kl_loss(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over rows of KL(p_i || q_i), with 0*log(0/q) = 0."""
    pt = torch.as_tensor(np.asarray(p), dtype=torch.float64)
    qt = torch.as_tensor(np.asarray(q), dtype=torch.float64)
    return float(kl_loss_t(pt, qt))


def cas_loss(p: np.ndarray, q: np.ndarray, recon_out: np.ndarray, target: np.ndarray, lam: float) -> float:
    """Combined objective: kl_loss(P, Q) + lam * reconstruction_loss."""
    return kl_loss(p, q) + lam * reconstruction_loss(recon_out, target)


# ---------------------------------------------------------------------------
# KMeans (Lloyd + kmeans++ seeding, deterministic restarts)
# ---------------------------------------------------------------------------


def _pairwise_sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _min_pairwise_distance(centroids: np.ndarray) -> float:
    k = centroids.shape[0]
    if k < 2:
        return math.inf
    d2 = _pairwise_sq_dist(centroids, centroids)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def kmeans_objective(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:  # all remaining points coincide with a centroid
            centroids[j] = points[rng.integers(n)]
        else:
            centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = KMEANS_MAX_ITER):
    """Lloyd iterations; returns (centroids, labels, objective, objective trace)."""
    k = centroids.shape[0]
    labels = _pairwise_sq_dist(points, centroids).argmin(axis=1)
    trace = [kmeans_objective(points, labels, centroids)]
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        # empty-cluster repair: re-seed at the point farthest from its centroid
        for j in range(k):
            if not (labels == j).any():
                far = ((points - new_centroids[labels]) ** 2).sum(axis=1).argmax()
                new_centroids[j] = points[far]
        new_labels = _pairwise_sq_dist(points, new_centroids).argmin(axis=1)
        centroids = new_centroids
        trace.append(kmeans_objective(points, new_labels, centroids))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels, trace[-1], trace


def kmeans_fit(embeddings: np.ndarray, k: int, seed: int, restarts: int = 10):
    """Best of ``restarts`` kmeans++-seeded Lloyd runs.

    Returns (ClusterState, hard assignments, objective). Deterministic in
    (embeddings, k, seed, restarts); objective ties keep the earliest restart.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"embeddings: expected (N, D), got shape {points.shape}")
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        centroids, labels, objective, _ = _lloyd(points, _kmeans_pp_init(points, k, rng))
        if best is None or objective < best[2]:
            best = (centroids, labels, objective)
    centroids, labels, objective = best
    return ClusterState(centroids=centroids, alpha=1.0), labels, objective


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _dataset_tensor(ds: PatchDataset) -> torch.Tensor:
    pixels = ds.all_pixels()  # (N, H, W, C), labeled + unlabeled features
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2)))


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss during {where}: {value}")


def embed_all(net: EncoderDecoder, data: torch.Tensor, batch_size: int) -> torch.Tensor:
    """Embeddings of every patch in fixed order (deterministic E step)."""
    outs = []
    with torch.no_grad():
        for start in range(0, data.shape[0], batch_size):
            outs.append(net.embed_t(data[start : start + batch_size]))
    return torch.cat(outs, dim=0)


def phase1_train(ds: PatchDataset, net_cfg: NetworkConfig, pt_cfg: PretrainConfig):
    """Reconstruction pretraining over all patch features (labels unused).

    Returns (network, history); history holds one record per epoch with the
    epoch-mean reconstruction loss.
    """
    pt_cfg.validate()
    if net_cfg.head != HEAD_RECONSTRUCTION:
        raise ValueError("phase1_train expects a reconstruction-head config")
    net = init_network(net_cfg, pt_cfg.seed)
    data = _dataset_tensor(ds)
    n = data.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([pt_cfg.seed, 1]))
    opt = torch.optim.SGD(net.parameters(), lr=pt_cfg.learning_rate, momentum=pt_cfg.momentum)

    history = []
    for epoch in range(pt_cfg.phase1_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, pt_cfg.batch_size):
            xb = data[order[start : start + pt_cfg.batch_size]]
            loss = reconstruction_loss_t(net.reconstruct_t(xb), xb)
            loss_val = float(loss.detach())
            _check_finite(loss_val, f"phase 1 epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss_val)
        history.append({"epoch": epoch, "reconstruction": float(np.mean(losses))})
    return net, history


def _phase2_refresh(net, centroids, alpha, data, batch_size):
    z = embed_all(net, data, batch_size)
    with torch.no_grad():
        q = soft_assign_t(z, centroids, alpha)
        p = target_distribution_t(q)
    return q, p


def _check_collapse(centroids: torch.Tensor) -> None:
    if _min_pairwise_distance(centroids.detach().numpy().astype(np.float64)) < CENTROID_COLLAPSE_TOL:
        raise DegenerateClusteringError(
            "degenerate clustering: centroids collapsed (pairwise distance below "
            f"{CENTROID_COLLAPSE_TOL}); a reconstruction term (lam > 0) usually prevents this"
        )


def phase2_train(ds: PatchDataset, net: EncoderDecoder, cs: ClusterState, pt_cfg: PretrainConfig):
    """EM-style refinement of network weights and centroids.

    E step: recompute Q over the whole pool and refresh the target P every
    ``target_update_interval`` optimizer steps (P stays fixed in between).
    M step: SGD on KL(P||Q) + lam * reconstruction w.r.t. weights and
    centroids. Stops when the hard-assignment churn between consecutive
    refreshes falls below ``stop_delta``, or after ``phase2_epochs``.

    Returns (network, ClusterState, final Q, history).
    """
    pt_cfg.validate()
    cs.validate()
    if net.config.head != HEAD_RECONSTRUCTION:
        raise ValueError("phase2_train expects the reconstruction-head pretraining network")
    data = _dataset_tensor(ds)
    n = data.shape[0]
    dtype = next(net.parameters()).dtype
    centroids = torch.nn.Parameter(torch.as_tensor(np.asarray(cs.centroids), dtype=dtype))
    alpha = float(cs.alpha)
    opt = torch.optim.SGD(
        [
            {"params": list(net.parameters()), "lr": pt_cfg.phase2_lr},
            {"params": [centroids], "lr": pt_cfg.centroid_learning_rate},
        ],
        momentum=pt_cfg.momentum,
    )
    rng = np.random.default_rng(np.random.SeedSequence([pt_cfg.seed, 2]))

    step = 0
    prev_hard = None
    churn = 1.0
    p_full = None
    stopped = False
    history = []

    def refresh() -> bool:
        """Recompute Q/P; returns True when the stop rule fires."""
        nonlocal prev_hard, churn, p_full
        _check_collapse(centroids)
        q, p = _phase2_refresh(net, centroids, alpha, data, pt_cfg.batch_size)
        hard = q.argmax(dim=1).numpy()
        if prev_hard is not None:
            churn = float((hard != prev_hard).mean())
            if churn < pt_cfg.stop_delta:
                return True
        prev_hard = hard
        p_full = p
        return False

    refresh()
    for epoch in range(pt_cfg.phase2_epochs):
        order = rng.permutation(n)
        kl_terms, recon_terms = [], []
        for start in range(0, n, pt_cfg.batch_size):
            if pt_cfg.target_update_interval is not None and step > 0 and step % pt_cfg.target_update_interval == 0:
                if refresh():
                    stopped = True
                    break
            idx = order[start : start + pt_cfg.batch_size]
            xb = data[idx]
            features, _ = net.encode_t(xb)
            z = features.mean(dim=(2, 3))
            q = soft_assign_t(z, centroids, alpha)
            kl = kl_loss_t(p_full[idx], q)
            if pt_cfg.lam > 0:
                out = net.head(net.decode_t(features, None))
                recon = reconstruction_loss_t(out, xb)
                loss = kl + pt_cfg.lam * recon
            else:
                loss = kl
                with torch.no_grad():
                    out = net.head(net.decode_t(features, None))
                    recon = reconstruction_loss_t(out, xb)
            _check_finite(float(loss.detach()), f"phase 2 epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            kl_terms.append(float(kl.detach()))
            recon_terms.append(float(recon.detach()))
        if kl_terms:
            history.append(
                {
                    "epoch": epoch,
                    "kl": float(np.mean(kl_terms)),
                    "reconstruction": float(np.mean(recon_terms)),
                    "total": float(np.mean(kl_terms) + pt_cfg.lam * np.mean(recon_terms)),
                    "churn": churn,
                }
            )
        if stopped:
            break

    _check_collapse(centroids)
    final_q = _phase2_refresh(net, centroids, alpha, data, pt_cfg.batch_size)[0].numpy()
    final_cs = ClusterState(centroids=centroids.detach().numpy().copy(), alpha=alpha)
    return net, final_cs, final_q, history
