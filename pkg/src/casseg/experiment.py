"""Experiment matrix orchestration: pretraining caches, cells, reports.

A cell is one (method, few-shot size, seed) combination. Every artifact
embeds the digest of the configuration that produced it; cells whose report
already carries the current digest are skipped unless forced, and phase-1 /
phase-2 checkpoints are shared across the methods that need them.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network
from .active import active_round, derive_seed
from .dataio import (
    PatchDataset,
    SyntheticConfig,
    ValidationError,
    aggregated_label,
    generate_synthetic,
    load_dataset,
    split_indices,
)
from .evaluate import MetricsReport, compare_runs, f1_scores, weighted_cluster_entropy
from .finetune import FinetuneConfig, finetune_train, predict_masks
from .network import NetworkConfig, load_checkpoint, read_checkpoint_extra, save_checkpoint
from .pretrain import (
    PretrainConfig,
    _dataset_tensor,
    embed_all,
    kmeans_fit,
    phase1_train,
    phase2_train,
)

METHOD_CAS = "cas"
METHOD_DEC = "dec"
METHOD_AUTOENCODER = "autoencoder"
METHOD_SCRATCH = "scratch"
METHODS = (METHOD_CAS, METHOD_DEC, METHOD_AUTOENCODER, METHOD_SCRATCH)

# salts for per-stage seed derivation from the master seed
_SEED_EVAL, _SEED_TRAIN, _SEED_FT, _SEED_KMEANS = 21, 22, 23, 24


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    dataset_path: str | None = None
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(in_channels=4, num_classes=4))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    methods: list[str] = field(default_factory=lambda: [METHOD_CAS, METHOD_AUTOENCODER, METHOD_SCRATCH])
    few_shot_sizes: list[int] = field(default_factory=lambda: [10])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_patches: int = 50
    active_rounds: int = 1
    out_dir: str = "runs"

    def validate(self) -> None:
        if (self.synthetic is None) == (self.dataset_path is None):
            raise ValidationError("dataset: exactly one of synthetic config or dataset_path must be set")
        if not self.seeds:
            raise ValidationError("seeds: need at least one seed")
        if not self.methods:
            raise ValidationError("methods: need at least one method")
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"methods: unknown method {m!r}, expected one of {METHODS}")
        if any(n < 1 for n in self.few_shot_sizes):
            raise ValidationError("few_shot_sizes: sizes must be >= 1")
        if self.eval_patches < 1:
            raise ValidationError(f"eval_patches: must be >= 1, got {self.eval_patches}")
        if self.active_rounds < 1:
            raise ValidationError(f"active_rounds: must be >= 1, got {self.active_rounds}")

    def to_dict(self) -> dict:
        return {
            "synthetic": asdict(self.synthetic) if self.synthetic else None,
            "dataset_path": self.dataset_path,
            "network": asdict(self.network),
            "pretrain": asdict(self.pretrain),
            "finetune": asdict(self.finetune),
            "methods": list(self.methods),
            "few_shot_sizes": list(self.few_shot_sizes),
            "seeds": list(self.seeds),
            "eval_patches": self.eval_patches,
            "active_rounds": self.active_rounds,
            "out_dir": str(self.out_dir),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f for f in payload}
        unknown = known - {
            "synthetic", "dataset_path", "network", "pretrain", "finetune",
            "methods", "few_shot_sizes", "seeds", "eval_patches", "active_rounds", "out_dir",
        }
        if unknown:
            raise ValidationError(f"config: unknown keys {sorted(unknown)}")
        base = cls()
        synthetic = payload.get("synthetic", asdict(base.synthetic))
        return cls(
            synthetic=SyntheticConfig(**synthetic) if synthetic is not None else None,
            dataset_path=payload.get("dataset_path"),
            network=NetworkConfig(**payload["network"]) if "network" in payload else base.network,
            pretrain=PretrainConfig(**payload["pretrain"]) if "pretrain" in payload else base.pretrain,
            finetune=FinetuneConfig(**payload["finetune"]) if "finetune" in payload else base.finetune,
            methods=list(payload.get("methods", base.methods)),
            few_shot_sizes=list(payload.get("few_shot_sizes", base.few_shot_sizes)),
            seeds=list(payload.get("seeds", base.seeds)),
            eval_patches=int(payload.get("eval_patches", base.eval_patches)),
            active_rounds=int(payload.get("active_rounds", base.active_rounds)),
            out_dir=str(payload.get("out_dir", base.out_dir)),
        )


def default_benchmark_config(out_dir: str = "runs") -> ExperimentConfig:
    """The stock synthetic benchmark: 200 unlabeled patches, few-shot size 10,
    5 seeds, with a network narrow enough for single-core training."""
    return ExperimentConfig(
        synthetic=SyntheticConfig(n_labeled=110, n_unlabeled=200, seed=0),
        network=NetworkConfig(in_channels=4, num_classes=4, depth=3, base_channels=8),
        pretrain=PretrainConfig(),
        finetune=FinetuneConfig(),
        out_dir=out_dir,
    )


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest of the scientific configuration.

    Cell coordinates (methods, sizes, seeds) and the output location are
    excluded: they identify cells, not the configuration, so reports from
    partial runs of the same setup stay comparable and cacheable.
    """
    payload = cfg.to_dict()
    for key in ("out_dir", "seeds", "methods", "few_shot_sizes"):
        payload.pop(key)
    return _digest(payload)


def _dataset_id(cfg: ExperimentConfig) -> dict:
    if cfg.synthetic is not None:
        return {"synthetic": asdict(cfg.synthetic)}
    return {"path": str(cfg.dataset_path)}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_jsonl(path: Path, records) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def load_data(cfg: ExperimentConfig) -> PatchDataset:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    return load_dataset(cfg.dataset_path)


def resolve_k(cfg: ExperimentConfig, ds: PatchDataset) -> int:
    return cfg.pretrain.k if cfg.pretrain.k is not None else 2 * ds.manifest.num_classes


class ArtifactStore:
    """Disk + memory cache for per-seed pretraining artifacts."""

    def __init__(self, cfg: ExperimentConfig, ds: PatchDataset, force: bool = False):
        self.cfg = cfg
        self.ds = ds
        self.force = force
        self.dir = Path(cfg.out_dir) / "pretrain"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._phase1: dict[int, network.EncoderDecoder] = {}
        self._phase2: dict[tuple[int, float], tuple] = {}
        self._clustering: dict[int, tuple] = {}

    def _phase1_key(self, seed: int) -> str:
        p = self.cfg.pretrain
        return _digest(
            {
                "dataset": _dataset_id(self.cfg),
                "network": asdict(self.cfg.network),
                "phase1": {
                    "epochs": p.phase1_epochs,
                    "batch_size": p.batch_size,
                    "lr": p.learning_rate,
                    "momentum": p.momentum,
                },
                "seed": seed,
            }
        )

    def _phase2_key(self, seed: int, lam: float) -> str:
        p = self.cfg.pretrain
        return _digest(
            {
                "phase1": self._phase1_key(seed),
                "phase2": {
                    "epochs": p.phase2_epochs,
                    "lam": lam,
                    "k": resolve_k(self.cfg, self.ds),
                    "interval": p.target_update_interval,
                    "stop_delta": p.stop_delta,
                    "lr": p.phase2_lr,
                    "centroid_lr": p.centroid_learning_rate,
                    "restarts": p.kmeans_restarts,
                },
            }
        )

    def phase1(self, seed: int) -> network.EncoderDecoder:
        if seed in self._phase1:
            return self._phase1[seed]
        key = self._phase1_key(seed)
        path = self.dir / f"phase1_s{seed}.ckpt"
        if path.exists() and not self.force and read_checkpoint_extra(path).get("digest") == key:
            net, _ = load_checkpoint(path)
        else:
            pt = replace(self.cfg.pretrain, seed=seed)
            net, history = phase1_train(self.ds, self.cfg.network, pt)
            save_checkpoint(net, path, extra={"digest": key, "stage": "phase1", "seed": seed})
            _write_jsonl(self.dir / f"phase1_s{seed}.log.jsonl", history)
        self._phase1[seed] = net
        return net

    def phase1_clustering(self, seed: int):
        """KMeans over phase-1 embeddings of every patch (labeled first)."""
        if seed not in self._clustering:
            net = self.phase1(seed)
            z = embed_all(net, _dataset_tensor(self.ds), self.cfg.pretrain.batch_size).numpy()
            cs, labels, objective = kmeans_fit(
                z, resolve_k(self.cfg, self.ds), seed=derive_seed(seed, _SEED_KMEANS),
                restarts=self.cfg.pretrain.kmeans_restarts,
            )
            self._clustering[seed] = (cs, labels, z, objective)
        return self._clustering[seed]

    def phase2(self, seed: int, lam: float):
        """Phase-2 refined (network, ClusterState, Q over all patches)."""
        cache_key = (seed, lam)
        if cache_key in self._phase2:
            return self._phase2[cache_key]
        key = self._phase2_key(seed, lam)
        path = self.dir / f"phase2_lam{lam:g}_s{seed}.ckpt"
        if path.exists() and not self.force and read_checkpoint_extra(path).get("digest") == key:
            net, cs = load_checkpoint(path)
            q = np.asarray(json.loads((self.dir / f"phase2_lam{lam:g}_s{seed}.q.json").read_text()))
        else:
            cs0, _, _, _ = self.phase1_clustering(seed)
            pt = replace(
                self.cfg.pretrain, seed=seed, lam=lam, k=resolve_k(self.cfg, self.ds)
            )
            net, cs, q, history = phase2_train(self.ds, copy.deepcopy(self.phase1(seed)), cs0, pt)
            save_checkpoint(net, path, cluster_state=cs, extra={"digest": key, "stage": "phase2", "seed": seed})
            _atomic_write(self.dir / f"phase2_lam{lam:g}_s{seed}.q.json", json.dumps(q.tolist()))
            _write_jsonl(self.dir / f"phase2_lam{lam:g}_s{seed}.log.jsonl", history)
        self._phase2[cache_key] = (net, cs, q)
        return self._phase2[cache_key]


def _cell_splits(cfg: ExperimentConfig, ds: PatchDataset, size: int, seed: int):
    eval_idx, pool_idx = split_indices(ds.n_labeled, cfg.eval_patches, derive_seed(seed, _SEED_EVAL))
    train_pos, _ = split_indices(len(pool_idx), size, derive_seed(seed, _SEED_TRAIN))
    return eval_idx, pool_idx[train_pos]


def _entropy_of_assignments(ds: PatchDataset, assignments: np.ndarray, k: int) -> float:
    agg = np.array([aggregated_label(m) for _, m in ds.labeled])
    return weighted_cluster_entropy(assignments[: ds.n_labeled], agg, k, ds.manifest.num_classes)


def run_cell(cfg: ExperimentConfig, ds: PatchDataset, store: ArtifactStore, method: str, size: int, seed: int):
    """One (method, size, seed) cell: fine-tune, evaluate, report."""
    started = time.time()
    k = resolve_k(cfg, ds)
    eval_idx, train_idx = _cell_splits(cfg, ds, size, seed)
    train_pairs = [ds.labeled[i] for i in train_idx]
    eval_pairs = [ds.labeled[i] for i in eval_idx]

    entropy = None
    if method == METHOD_SCRATCH:
        init_net = None
    elif method == METHOD_AUTOENCODER:
        init_net = store.phase1(seed)
        _, labels, _, _ = store.phase1_clustering(seed)
        entropy = _entropy_of_assignments(ds, labels, k)
    elif method in (METHOD_CAS, METHOD_DEC):
        lam = cfg.pretrain.lam if method == METHOD_CAS else 0.0
        init_net, _, q = store.phase2(seed, lam)
        entropy = _entropy_of_assignments(ds, q.argmax(axis=1), k)
    else:
        raise ValidationError(f"methods: unknown method {method!r}")

    ft = replace(
        cfg.finetune,
        seed=derive_seed(seed, _SEED_FT),
        init_mode="scratch" if method == METHOD_SCRATCH else "pretrained",
    )
    model, history = finetune_train(init_net, train_pairs, cfg.network, ft)
    pred = predict_masks(model, [p for p, _ in eval_pairs])
    true = np.stack([m.labels for _, m in eval_pairs], axis=0)
    per_class, mean = f1_scores(pred, true, ds.manifest.num_classes)

    report = MetricsReport(
        per_class_f1=per_class,
        mean_f1=mean,
        weighted_entropy=entropy,
        metadata={
            "method": method,
            "n_labeled": size,
            "seed": seed,
            "config_digest": config_digest(cfg),
            "f1_average": "macro",
            "k": k,
            "wall_time_s": round(time.time() - started, 3),
            "cached": False,
        },
    )
    return report, model, history


def run_experiment(cfg: ExperimentConfig, force: bool = False):
    """Run the full (method x few-shot size x seed) matrix.

    Returns (reports, failures); failed cells are recorded and skipped, other
    cells proceed. Completed cells with a matching config digest are reused.
    """
    cfg.validate()
    digest = config_digest(cfg)
    ds = load_data(cfg)
    out = Path(cfg.out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.json", json.dumps(dict(cfg.to_dict(), config_digest=digest), indent=2, sort_keys=True))

    store = ArtifactStore(cfg, ds, force=force)
    reports, failures = [], []
    for seed in cfg.seeds:
        for size in cfg.few_shot_sizes:
            for method in cfg.methods:
                cell = f"{method}_n{size}_s{seed}"
                cell_dir = cells_dir / cell
                report_path = cell_dir / "report.json"
                if report_path.exists() and not force:
                    cached = MetricsReport.from_json(report_path.read_text())
                    if cached.metadata.get("config_digest") == digest:
                        cached.metadata["cached"] = True
                        reports.append(cached)
                        continue
                try:
                    report, model, history = run_cell(cfg, ds, store, method, size, seed)
                except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    failures.append({"cell": cell, "error": f"{type(exc).__name__}: {exc}"})
                    _atomic_write(
                        cell_dir / "failure.json",
                        json.dumps(
                            {"cell": cell, "config_digest": digest, "error": f"{type(exc).__name__}: {exc}",
                             "traceback": traceback.format_exc()},
                            indent=2,
                        ),
                    )
                    continue
                cell_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, cell_dir / "finetuned.ckpt", extra={"digest": digest, "cell": cell})
                _write_jsonl(cell_dir / "finetune.log.jsonl", history)
                _atomic_write(report_path, report.to_json())
                reports.append(report)
    return reports, failures


def run_active(cfg: ExperimentConfig, budgets: list[int], force: bool = False):
    """Active-learning cells: for each (budget, seed), the cluster-based round
    plus its random-sampling control. Requires cas pretraining artifacts."""
    cfg.validate()
    if not budgets:
        raise ValidationError("budgets: need at least one budget")
    if any(b < 0 for b in budgets):
        raise ValidationError("budgets: must be >= 0")
    digest = config_digest(cfg)
    ds = load_data(cfg)
    out = Path(cfg.out_dir)
    store = ArtifactStore(cfg, ds, force=force)

    reports, failures = [], []
    for seed in cfg.seeds:
        for budget in budgets:
            cell = f"active_b{budget}_s{seed}"
            cell_dir = out / "active" / cell
            paths = [cell_dir / "active_report.json", cell_dir / "random_report.json"]
            if all(p.exists() for p in paths) and not force:
                cached = [MetricsReport.from_json(p.read_text()) for p in paths]
                if all(r.metadata.get("config_digest") == digest for r in cached):
                    for r in cached:
                        r.metadata["cached"] = True
                    reports.extend(cached)
                    continue
            try:
                net, cs, _ = store.phase2(seed, cfg.pretrain.lam)
                ft = replace(cfg.finetune, init_mode="pretrained")
                active_rep, random_rep, manifest = active_round(
                    ds, net, cs, budget, ft, seed=seed,
                    eval_count=cfg.eval_patches, rounds=cfg.active_rounds,
                )
            except Exception as exc:  # noqa: BLE001
                cell_dir.mkdir(parents=True, exist_ok=True)
                failures.append({"cell": cell, "error": f"{type(exc).__name__}: {exc}"})
                _atomic_write(
                    cell_dir / "failure.json",
                    json.dumps({"cell": cell, "error": f"{type(exc).__name__}: {exc}",
                                "traceback": traceback.format_exc()}, indent=2),
                )
                continue
            cell_dir.mkdir(parents=True, exist_ok=True)
            for rep in (active_rep, random_rep):
                rep.metadata.update({"config_digest": digest, "method": METHOD_CAS, "cached": False})
            _atomic_write(paths[0], active_rep.to_json())
            _atomic_write(paths[1], random_rep.to_json())
            _atomic_write(cell_dir / "queries.json", json.dumps(manifest, indent=2, sort_keys=True))
            reports.extend([active_rep, random_rep])
    return reports, failures


def collect_reports(out_dir) -> list[MetricsReport]:
    reports = []
    for path in sorted(Path(out_dir).glob("**/report.json")) + sorted(Path(out_dir).glob("**/*_report.json")):
        reports.append(MetricsReport.from_json(path.read_text()))
    return reports


def write_reports_csv(reports: list[MetricsReport], path) -> None:
    """Flat per-run CSV for external plotting."""
    fields = ["method", "n_labeled", "seed", "budget", "arm", "mean_f1", "weighted_entropy"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in reports:
            writer.writerow(
                {
                    "method": r.metadata.get("method", ""),
                    "n_labeled": r.metadata.get("n_labeled", ""),
                    "seed": r.metadata.get("seed", ""),
                    "budget": r.metadata.get("budget", ""),
                    "arm": r.metadata.get("arm", ""),
                    "mean_f1": "" if r.mean_f1 is None else f"{r.mean_f1:.6f}",
                    "weighted_entropy": "" if r.weighted_entropy is None else f"{r.weighted_entropy:.6f}",
                }
            )


def write_summary_csv(reports: list[MetricsReport], path) -> list[dict]:
    rows = compare_runs(reports)
    fields = ["method", "n_labeled", "budget", "arm", "runs", "mean_f1", "std_f1", "mean_weighted_entropy"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in fields})
    return rows


def format_summary(rows: list[dict]) -> str:
    if not rows:
        return "(no reports)"
    header = f"{'method':<14}{'n':>5}{'budget':>8}{'arm':>8}{'runs':>6}{'mean F1':>10}{'std':>8}{'entropy':>10}"
    lines = [header, "-" * len(header)]

    def cell(value, spec="") -> str:
        return "-" if value is None else format(value, spec)

    for row in rows:
        lines.append(
            f"{row['method']:<14}"
            f"{cell(row['n_labeled']):>5}"
            f"{cell(row['budget']):>8}"
            f"{cell(row['arm']):>8}"
            f"{row['runs']:>6}"
            f"{cell(row['mean_f1'], '.4f'):>10}"
            f"{cell(row['std_f1'], '.4f'):>8}"
            f"{cell(row['mean_weighted_entropy'], '.4f'):>10}"
        )
    return "\n".join(lines)
