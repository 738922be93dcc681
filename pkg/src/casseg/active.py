"""Cluster-driven active sampling with a simulated labeling oracle.

The labeling budget is spread uniformly over clusters; the non-divisible
remainder goes to the clusters whose predicted majority classes have the
highest entropy, and within each cluster the patches closest to the centroid
are queried. All tie-breaks are by lower index, so rounds replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import network
from .dataio import PatchDataset, aggregated_label, split_indices
from .evaluate import MetricsReport, f1_scores
from .finetune import FinetuneConfig, finetune_train, predict_masks
from .pretrain import ClusterState

# salts for deriving stage seeds from the round seed
_SEED_EVAL, _SEED_SET, _SEED_FT, _SEED_RANDOM = 11, 12, 13, 14


@dataclass
class QueryBudget:
    total: int
    allocation: np.ndarray  # per-cluster counts, length K

    def __post_init__(self):
        self.allocation = np.asarray(self.allocation, dtype=np.int64)
        if (self.allocation < 0).any():
            raise ValueError("allocation entries must be >= 0")
        if int(self.allocation.sum()) != self.total:
            raise ValueError(f"allocation sums to {int(self.allocation.sum())}, expected {self.total}")


def derive_seed(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


def cluster_uncertainty(pred_majorities, assignments, k: int, num_classes: int) -> np.ndarray:
    """Per-cluster Shannon entropy (natural log) of predicted majority classes.

    Empty clusters score 0. Values lie in [0, log(num_classes)].
    """
    pred_majorities = np.asarray(pred_majorities)
    assignments = np.asarray(assignments)
    out = np.zeros(k, dtype=np.float64)
    for j in range(k):
        members = pred_majorities[assignments == j]
        if len(members) == 0:
            continue
        counts = np.bincount(members, minlength=num_classes)
        p = counts[counts > 0] / counts.sum()
        out[j] = float(-(p * np.log(p)).sum())
    return out


def allocate_budget(uncertainty, cluster_sizes, budget: int, k: int) -> QueryBudget:
    """Spread ``budget`` over clusters.

    Everyone gets floor(B/K); the B mod K extras go one each to the most
    uncertain clusters (ties to the lower index). With B < K only the top-B
    uncertain clusters receive one. Allocations are capped at cluster size and
    overflow moves to the next-most-uncertain uncapped cluster.
    """
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    sizes = np.asarray(cluster_sizes, dtype=np.int64)
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget > int(sizes.sum()):
        raise ValueError(f"budget {budget} exceeds the available pool of {int(sizes.sum())}")
    priority = sorted(range(k), key=lambda j: (-uncertainty[j], j))
    desired = np.full(k, budget // k, dtype=np.int64)
    for rank, j in enumerate(priority):
        if rank < budget % k:
            desired[j] += 1
    allocation = np.minimum(desired, sizes)
    leftover = budget - int(allocation.sum())
    while leftover > 0:
        for j in priority:
            if allocation[j] < sizes[j]:
                allocation[j] += 1
                leftover -= 1
                break
    return QueryBudget(total=budget, allocation=allocation)


def select_queries(embeddings, cs: ClusterState, assignments, qb: QueryBudget, exclude=()) -> np.ndarray:
    """Per cluster, the allocated number of non-excluded members nearest the
    centroid (distance ties to the lower patch index). Returns sorted indices."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    assignments = np.asarray(assignments)
    excluded = set(int(i) for i in exclude)
    chosen: list[int] = []
    for j, quota in enumerate(qb.allocation):
        if quota == 0:
            continue
        members = [int(i) for i in np.flatnonzero(assignments == j) if int(i) not in excluded]
        if len(members) < quota:
            raise ValueError(
                f"infeasible allocation: cluster {j} needs {int(quota)} patches, {len(members)} available after exclusions"
            )
        d = np.sqrt(((embeddings[members] - cs.centroids[j]) ** 2).sum(axis=1))
        order = sorted(range(len(members)), key=lambda t: (d[t], members[t]))
        chosen.extend(members[t] for t in order[: int(quota)])
    return np.array(sorted(chosen), dtype=np.int64)


def _majority_predictions(model, patches) -> np.ndarray:
    masks = predict_masks(model, patches)
    out = np.empty(len(masks), dtype=np.int64)
    for i, mask in enumerate(masks):
        counts = np.bincount(mask.ravel())
        out[i] = int(counts.argmax())
    return out


def _finetune_and_score(net, train_pairs, eval_pairs, ft_cfg, num_classes):
    model, history = finetune_train(net, train_pairs, net.config, ft_cfg)
    pred = predict_masks(model, [p for p, _ in eval_pairs])
    true = np.stack([m.labels for _, m in eval_pairs], axis=0)
    per_class, mean = f1_scores(pred, true, num_classes)
    return model, per_class, mean, history


def active_round(
    ds: PatchDataset,
    net,
    cs: ClusterState,
    budget: int,
    ft_cfg: FinetuneConfig,
    seed: int,
    eval_count: int | None = None,
    rounds: int = 1,
):
    """One active-learning cell: cluster-based querying vs a random control.

    The labeled pool is split into a held-out evaluation set and candidates;
    a bootstrap seed set of K candidates is labeled up front (both arms share
    it), then each round spends its share of ``budget``: cluster-based
    selection queries centroid-nearest patches with entropy-weighted
    allocation, the control queries uniformly. The remainder's retained labels
    act as the oracle. Returns (active report, random report, query manifest).
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    num_classes = ds.manifest.num_classes
    n_labeled = ds.n_labeled
    if eval_count is None:
        eval_count = min(50, n_labeled // 3)
    eval_idx, candidate_idx = split_indices(n_labeled, eval_count, derive_seed(seed, _SEED_EVAL))
    eval_pairs = [ds.labeled[i] for i in eval_idx]
    candidates = [ds.labeled[i] for i in candidate_idx]
    n_cand = len(candidates)

    if budget == 0:
        meta = {"budget": 0, "seed": seed, "empty_query_set": True, "rounds": rounds}
        empty = MetricsReport(per_class_f1=[], mean_f1=None, metadata=dict(meta, arm="active"))
        control = MetricsReport(per_class_f1=[], mean_f1=None, metadata=dict(meta, arm="random"))
        return empty, control, {"rounds": []}

    k = cs.k
    if n_cand < k:
        raise ValueError(f"need at least k={k} candidate patches for the seed set, got {n_cand}")
    seed_positions, _ = split_indices(n_cand, k, derive_seed(seed, _SEED_SET))
    seed_positions = set(int(i) for i in seed_positions)

    embeddings = network.embed(net, np.stack([p.pixels for p, _ in candidates], axis=0))
    assignments = ((embeddings[:, None, :] - cs.centroids[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)

    per_round = [budget // rounds + (1 if r < budget % rounds else 0) for r in range(rounds)]

    def run_arm(arm: str):
        labeled_positions = set(seed_positions)
        model = None
        round_scores, manifest_rounds = [], []
        per_class = []
        mean = None
        for r, b in enumerate(per_round):
            available = [i for i in range(n_cand) if i not in labeled_positions]
            if b > len(available):
                raise ValueError(f"budget {b} exceeds the available pool of {len(available)}")
            if arm == "active":
                if model is None:
                    ft_boot = replace(ft_cfg, seed=derive_seed(seed, _SEED_FT))
                    model, _, _, _ = _finetune_and_score(
                        net, [candidates[i] for i in sorted(labeled_positions)], eval_pairs, ft_boot, num_classes
                    )
                majorities = _majority_predictions(model, [p for p, _ in candidates])
                unc = cluster_uncertainty(majorities, assignments, k, num_classes)
                avail_sizes = np.bincount(assignments[available], minlength=k)
                qb = allocate_budget(unc, avail_sizes, b, k)
                queries = select_queries(embeddings, cs, assignments, qb, exclude=labeled_positions)
                dists = np.sqrt(((embeddings[queries] - cs.centroids[assignments[queries]]) ** 2).sum(axis=1))
                manifest_rounds.append(
                    {
                        "round": r,
                        "budget": b,
                        "patch_indices": [int(candidate_idx[i]) for i in queries],
                        "cluster_ids": [int(assignments[i]) for i in queries],
                        "distances": [float(d) for d in dists],
                    }
                )
            else:
                rng = np.random.default_rng(derive_seed(seed, _SEED_RANDOM + r))
                queries = rng.choice(available, size=b, replace=False)
            labeled_positions.update(int(i) for i in queries)
            ft_round = replace(ft_cfg, seed=derive_seed(seed, _SEED_FT + 100 + r))
            model, per_class, mean, _ = _finetune_and_score(
                net, [candidates[i] for i in sorted(labeled_positions)], eval_pairs, ft_round, num_classes
            )
            round_scores.append(mean)
        meta = {
            "budget": budget,
            "seed": seed,
            "arm": arm,
            "rounds": rounds,
            "n_labeled": len(labeled_positions),
            "round_mean_f1": round_scores,
            "empty_query_set": False,
        }
        return MetricsReport(per_class_f1=per_class, mean_f1=mean, metadata=meta), manifest_rounds

    active_report, manifest_rounds = run_arm("active")
    random_report, _ = run_arm("random")
    return active_report, random_report, {"rounds": manifest_rounds}
