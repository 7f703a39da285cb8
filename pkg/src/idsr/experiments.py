"""Reusable desk-scale experiment recipes (shared by the CLI and the acceptance tests)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import synthetic_arrays
from .evalkit import Gallery, ProbeSet, cmc
from .frnet import ToyEmbedder, embed_batched, embedding_distance, load_embedder, pretrain_embedder, save_embedder
from .ipunet import IPUNetConfig
from .resample import DegradationSpec, degrade
from .trainer import LossWeights, TrainConfig, super_resolve, train_loop

TOY_SCHEDULE = (8, 16, 32, 32, 32, 32, 32)

# Embedders are pretrained on a pool that shares no identities with the
# evaluation sets: those are drawn from seeds far below this one.
EMBEDDER_SEED = 1000
EMBEDDER_IDENTITIES = 200
EMBEDDER_IMAGES = 6
EMBEDDER_STEPS = 1500


def reference_embedder(channels=3, cache: str | Path | None = None, steps=EMBEDDER_STEPS, log=None) -> ToyEmbedder:
    """Pretrained frozen ToyEmbedder, loaded from ``cache`` when it exists."""
    if cache is not None and Path(cache).exists():
        return load_embedder(cache)
    labels, imgs = synthetic_arrays(EMBEDDER_IDENTITIES, EMBEDDER_IMAGES, EMBEDDER_SEED, channels=channels)
    emb = pretrain_embedder(ToyEmbedder(in_channels=channels), imgs, labels, steps=steps, seed=EMBEDDER_SEED, log=log)
    if cache is not None:
        save_embedder(emb, cache)
    return emb


def rank1_at(net, embedder, gallery_imgs, probe_imgs, labels, res) -> float:
    """Rank-1 of degraded probes (optionally super-resolved) against clean gallery images."""
    x = degrade(probe_imgs, DegradationSpec(*res))
    if net is not None:
        x = super_resolve(net, x)
    gallery = Gallery(labels, embed_batched(embedder, gallery_imgs))
    return cmc(gallery, ProbeSet(labels, embed_batched(embedder, x)), 1).rank(1)


@dataclass
class ComparisonResult:
    seed: int
    resolution: tuple
    distance: dict = field(default_factory=dict)  # method -> mean SR/HR embedding distance
    rank1: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    nets: dict = field(default_factory=dict)


def identity_split(n_ids=20, seed=0, channels=3, images_per_id=6):
    """Image 0 of each identity is the gallery, image 1 the probe, the rest train."""
    _, imgs = synthetic_arrays(n_ids, images_per_id, seed, channels=channels)
    gal = imgs[0::images_per_id]
    prb = imgs[1::images_per_id]
    train = np.concatenate([imgs[k::images_per_id] for k in range(2, images_per_id)])
    return list(range(n_ids)), gal, prb, train


def compare_losses(embedder, seed, steps=1500, n_ids=20, data_seed=0, resolution=(16, 16), schedule=TOY_SCHEDULE,
                   channels=3) -> ComparisonResult:
    """Train a joint-loss and a pixel-only model with identical seed/steps and score both."""
    labels, gal, prb, train = identity_split(n_ids, data_seed, channels)
    hr_emb = embed_batched(embedder, prb)
    out = ComparisonResult(seed, resolution)
    for name, weights in (("joint", LossWeights(5.0, 1.0)), ("pixel", LossWeights(5.0, 0.0))):
        t0 = time.perf_counter()
        cfg = TrainConfig(steps=steps, seed=seed, weights=weights)
        net, _ = train_loop(train, cfg, embedder, net_config=IPUNetConfig(in_channels=channels,
                                                                         channel_schedule=schedule, seed=seed))
        sr = super_resolve(net, degrade(prb, DegradationSpec(*resolution)))
        out.distance[name] = float(embedding_distance(embed_batched(embedder, sr), hr_emb).mean())
        out.rank1[name] = rank1_at(net, embedder, gal, prb, labels, resolution)
        out.seconds[name] = time.perf_counter() - t0
        out.nets[name] = net
    return out


def overfit_run(embedder, n_ids=8, steps=2000, seed=0, schedule=TOY_SCHEDULE, channels=3, probe_res=(32, 32)):
    """Train on one image per identity; returns ``(report, rank1 of degraded training images)``."""
    _, imgs = synthetic_arrays(n_ids, 1, seed, channels=channels)
    cfg = TrainConfig(steps=steps, seed=seed)
    net, report = train_loop(imgs, cfg, embedder, net_config=IPUNetConfig(in_channels=channels, channel_schedule=schedule,
                                                                        seed=seed))
    return report, rank1_at(net, embedder, imgs, imgs, list(range(n_ids)), probe_res)
