"""Encoder-decoder segmentation network with toggleable skip connections.

The decoder's convolutions are always sized for concatenated skip inputs;
when skips are disabled (the pretraining configuration) zeros are fed in
their place. Every pretrained weight therefore transfers to the skip-enabled
fine-tuning network without shape surgery.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, replace, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1

HEAD_RECONSTRUCTION = "reconstruction"
HEAD_SEGMENTATION = "segmentation"


class CheckpointError(Exception):
    """Checkpoint file is unreadable or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unknown format version."""


@dataclass
class NetworkConfig:
    in_channels: int
    num_classes: int
    depth: int = 3
    base_channels: int = 32
    embedding_dim: int | None = None  # None -> bottleneck default base*2^(depth-1)
    use_skips: bool = False
    head: str = HEAD_RECONSTRUCTION

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be >= 1")
        if self.head not in (HEAD_RECONSTRUCTION, HEAD_SEGMENTATION):
            raise ValueError(f"unknown head {self.head!r}")
        if self.embedding_dim is None:
            self.embedding_dim = self.base_channels * 2 ** (self.depth - 1)
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {self.embedding_dim}")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    @property
    def pool_factor(self) -> int:
        return 2**self.depth


# leaky slope: plain ReLU lets narrow nets (and pretraining) strand whole
# channels dead, which freezes later cross-entropy training on some seeds
LEAKY_SLOPE = 0.01


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
    )


class EncoderDecoder(nn.Module):
    """U-shaped network; all tensors are NCHW internally.

    Encoder: ``depth`` conv blocks (channels doubling from base) each followed
    by 2x2 max-pool, then a bottleneck block at ``embedding_dim`` channels.
    Decoder: nearest-neighbor upsample + conv, concat skip (or zeros), conv
    block back down to the level's channel count. Head: 1x1 conv.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        chans = config.level_channels
        d = config.embedding_dim

        enc = []
        c_prev = config.in_channels
        for c in chans:
            enc.append(_conv_block(c_prev, c))
            c_prev = c
        self.enc_blocks = nn.ModuleList(enc)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(chans[-1], d)

        up_convs, dec_blocks = [], []
        c_prev = d
        for c in reversed(chans):
            up_convs.append(nn.Conv2d(c_prev, c, 3, padding=1))
            dec_blocks.append(_conv_block(2 * c, c))
            c_prev = c
        self.up_convs = nn.ModuleList(up_convs)
        self.dec_blocks = nn.ModuleList(dec_blocks)

        out_ch = config.in_channels if config.head == HEAD_RECONSTRUCTION else config.num_classes
        self.head = nn.Conv2d(chans[0], out_ch, 1)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        f = self.config.pool_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"H and W must be divisible by {f}, got {tuple(x.shape[2:])}")

    def encode_t(self, x: torch.Tensor):
        """Bottleneck features plus the per-level pre-pool skip maps."""
        self._check_input(x)
        skips = []
        for block in self.enc_blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return self.bottleneck(x), skips

    def embed_t(self, x: torch.Tensor) -> torch.Tensor:
        """Patch embedding: global average pool of the bottleneck map, (B, D)."""
        features, _ = self.encode_t(x)
        return features.mean(dim=(2, 3))

    def decode_t(self, features: torch.Tensor, skips) -> torch.Tensor:
        """Decoder trunk. ``skips=None`` feeds zeros (the pretraining path)."""
        x = features
        for i, (up, block) in enumerate(zip(self.up_convs, self.dec_blocks)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = up(x)
            skip = skips[-(i + 1)] if skips is not None else torch.zeros_like(x)
            x = block(torch.cat([x, skip], dim=1))
        return x

    def logits_t(self, x: torch.Tensor) -> torch.Tensor:
        features, skips = self.encode_t(x)
        trunk = self.decode_t(features, skips if self.config.use_skips else None)
        return self.head(trunk)

    def reconstruct_t(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.head != HEAD_RECONSTRUCTION:
            raise ValueError(f"head mismatch: reconstruct needs a {HEAD_RECONSTRUCTION} head, got {self.config.head}")
        return self.logits_t(x)

    def segment_t(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.head != HEAD_SEGMENTATION:
            raise ValueError(f"head mismatch: segment needs a {HEAD_SEGMENTATION} head, got {self.config.head}")
        return torch.softmax(self.logits_t(x), dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.head == HEAD_RECONSTRUCTION:
            return self.reconstruct_t(x)
        return self.segment_t(x)

    def describe(self) -> list[tuple[str, tuple[int, ...]]]:
        """Architecture table: (parameter path, shape) in registration order."""
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]


def init_network(cfg: NetworkConfig, seed: int) -> EncoderDecoder:
    """Build and deterministically initialize a network.

    Conv weights are fan-in-scaled normal draws, biases zero; all randomness
    comes from a generator seeded with ``seed``.
    """
    net = EncoderDecoder(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                module.bias.zero_()
    return net


def to_segmentation(net: EncoderDecoder, seed: int) -> EncoderDecoder:
    """Skip-enabled segmentation network carrying over all trunk weights.

    The head is re-initialized from ``seed`` because the pretrained head maps
    to image bands, not classes.
    """
    cfg = replace(net.config, use_skips=True, head=HEAD_SEGMENTATION)
    out = init_network(cfg, seed)
    trunk = {k: v for k, v in net.state_dict().items() if not k.startswith("head.")}
    missing = out.load_state_dict(trunk, strict=False)
    assert not missing.unexpected_keys
    return out


def _to_nchw(batch: np.ndarray, expect_channels: int) -> torch.Tensor:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[-1] != expect_channels:
        raise ValueError(f"expected (B, H, W, {expect_channels}) batch, got shape {batch.shape}")
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def encode(net: EncoderDecoder, batch: np.ndarray):
    """Bottleneck features (B, H/2^depth, W/2^depth, D) and the skip maps."""
    with torch.no_grad():
        features, skips = net.encode_t(_to_nchw(batch, net.config.in_channels))
    return (
        features.permute(0, 2, 3, 1).numpy(),
        [s.permute(0, 2, 3, 1).numpy() for s in skips],
    )


def embed(net: EncoderDecoder, batch: np.ndarray) -> np.ndarray:
    """Per-patch embedding vectors, (B, D)."""
    with torch.no_grad():
        z = net.embed_t(_to_nchw(batch, net.config.in_channels))
    return z.numpy()


def reconstruct(net: EncoderDecoder, batch: np.ndarray) -> np.ndarray:
    """Reconstruction with a linear output layer, same shape as the input."""
    with torch.no_grad():
        out = net.reconstruct_t(_to_nchw(batch, net.config.in_channels))
    return out.permute(0, 2, 3, 1).numpy()


def segment(net: EncoderDecoder, batch: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, (B, H, W, L); rows sum to 1."""
    with torch.no_grad():
        probs = net.segment_t(_to_nchw(batch, net.config.in_channels))
    return probs.permute(0, 2, 3, 1).numpy()


def save_checkpoint(net: EncoderDecoder, path, cluster_state=None, extra: dict | None = None) -> None:
    """Versioned archive: meta.json plus one raw float32 array per parameter.

    ``extra`` lands in meta.json as-is (e.g. the config digest of the run
    that produced the checkpoint).
    """
    names = [name for name, _ in net.state_dict().items()]
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": asdict(net.config),
        "params": names,
        "cluster_state": None,
        "extra": extra or {},
    }
    if cluster_state is not None:
        meta["cluster_state"] = {
            "k": int(cluster_state.k),
            "alpha": float(cluster_state.alpha),
            "dim": int(cluster_state.centroids.shape[1]),
        }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
        state = net.state_dict()
        for name in names:
            arr = state[name].detach().cpu().numpy().astype("<f4")
            zf.writestr(f"params/{name}.f32", arr.tobytes())
        if cluster_state is not None:
            arr = np.ascontiguousarray(cluster_state.centroids, dtype="<f4")
            zf.writestr("cluster/centroids.f32", arr.tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint: (network, cluster_state or None)."""
    from .pretrain import ClusterState  # local import to avoid a module cycle

    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"unknown checkpoint version {meta.get('format_version')!r}, expected {CHECKPOINT_VERSION}"
                )
            cfg = NetworkConfig(**meta["network_config"])
            net = EncoderDecoder(cfg)
            state = net.state_dict()
            if meta["params"] != list(state.keys()):
                raise CheckpointError("checkpoint parameter list does not match the architecture")
            loaded = {}
            for name in meta["params"]:
                raw = zf.read(f"params/{name}.f32")
                ref = state[name]
                if len(raw) != ref.numel() * 4:
                    raise CheckpointError(f"parameter {name}: wrong byte count")
                loaded[name] = torch.from_numpy(
                    np.frombuffer(raw, dtype="<f4").reshape(tuple(ref.shape)).copy()
                )
            net.load_state_dict(loaded)
            cluster_state = None
            if meta.get("cluster_state"):
                cs = meta["cluster_state"]
                raw = zf.read("cluster/centroids.f32")
                if len(raw) != cs["k"] * cs["dim"] * 4:
                    raise CheckpointError("cluster centroids: wrong byte count")
                centroids = np.frombuffer(raw, dtype="<f4").reshape(cs["k"], cs["dim"]).copy()
                cluster_state = ClusterState(centroids=centroids, alpha=cs["alpha"])
            return net, cluster_state
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


def read_checkpoint_extra(path) -> dict:
    """The extra metadata stored in a checkpoint, without loading weights."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return meta.get("extra", {})


def params_bytes(net: EncoderDecoder) -> bytes:
    """Concatenated float32 bytes of every parameter, for identity checks."""
    buf = io.BytesIO()
    for _, tensor in net.state_dict().items():
        buf.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()
