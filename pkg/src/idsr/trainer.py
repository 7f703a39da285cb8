"""Joint pixel + identity-embedding loss and the multi-scale training loop.

All randomness is derived from ``(seed, stream, step)`` so a run can be
resumed from any checkpoint and continue bit-identically.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ipunet
from .frnet import Embedder
from .resample import CANONICAL_RESOLUTIONS, DegradationSpec, degrade, sample_resolution
from .tensorcore import AdamState, Tensor, adam_step, mse, mul, no_grad

log = logging.getLogger(__name__)

_SAMPLER_STREAM = 1
_SHUFFLE_STREAM = 2
REPORT_COLUMNS = ["step", "res_h", "res_w", "l_pixel", "l_embedding", "l_total"]


@dataclass(frozen=True)
class LossWeights:
    beta: float = 5.0
    embedding_weight: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.embedding_weight < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    resolution_set: tuple = CANONICAL_RESOLUTIONS
    weights: LossWeights = field(default_factory=LossWeights)
    clip_norm: float | None = None
    checkpoint_every: int = 0
    workers: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        self.resolution_set = tuple(
            r if isinstance(r, DegradationSpec) else DegradationSpec(*r) for r in self.resolution_set
        )
        if not self.resolution_set:
            raise ValueError("resolution_set must not be empty")


@dataclass(frozen=True)
class ReportRow:
    step: int
    res_h: int
    res_w: int
    l_pixel: float
    l_embedding: float
    l_total: float


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def append(self, row: ReportRow):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def resolution_counts(self) -> dict:
        counts = {}
        for r in self.rows:
            counts[(r.res_h, r.res_w)] = counts.get((r.res_h, r.res_w), 0) + 1
        return counts

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.step, r.res_h, r.res_w, repr(r.l_pixel), repr(r.l_embedding), repr(r.l_total)])

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.append(
                    ReportRow(int(row["step"]), int(row["res_h"]), int(row["res_w"]), float(row["l_pixel"]),
                              float(row["l_embedding"]), float(row["l_total"]))
                )
        return rep

    def to_array(self) -> np.ndarray:
        return np.array([[r.step, r.res_h, r.res_w, r.l_pixel, r.l_embedding, r.l_total] for r in self.rows],
                        dtype=np.float32).reshape(-1, 6)

    @classmethod
    def from_array(cls, arr) -> "TrainReport":
        rep = cls()
        for s, h, w, lp, le, lt in np.asarray(arr, dtype=np.float32):
            rep.append(ReportRow(int(s), int(h), int(w), float(lp), float(le), float(lt)))
        return rep


def pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean squared pixel error between super-resolved and ground-truth images."""
    return mse(sr, hr)


def embedding_loss(e_sr: Tensor, e_hr: Tensor) -> Tensor:
    """Mean squared error between embeddings; ``e_hr`` is treated as a constant."""
    return mse(e_sr, e_hr.detach() if isinstance(e_hr, Tensor) else Tensor(e_hr))


def total_loss(l_pix: Tensor, l_emb: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    emb = l_emb if w.embedding_weight == 1.0 else mul(l_emb, w.embedding_weight)
    return emb + mul(l_pix, w.beta)


def step_resolution(cfg: TrainConfig, step: int) -> DegradationSpec:
    return sample_resolution(np.random.default_rng([cfg.seed, _SAMPLER_STREAM, step]), cfg.resolution_set)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for ``step``: a stream of per-epoch seeded permutations, cut into batches."""
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, _SHUFFLE_STREAM, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
        pos += take
    return np.asarray(out)


def prepare_batch(dataset: np.ndarray, cfg: TrainConfig, step: int):
    """Select, degrade and return ``(spec, lr_input, hr_target)`` for one step."""
    idx = batch_indices(len(dataset), cfg.batch_size, cfg.seed, step)
    hr = np.ascontiguousarray(dataset[idx], dtype=np.float32)
    spec = step_resolution(cfg, step)
    return spec, degrade(hr, spec), hr


def train_step(net: ipunet.IPUNet, embedder: Embedder, hr_batch, cfg: TrainConfig, step: int,
               opt_state: AdamState, prepared=None) -> ReportRow:
    """One optimization step on ``hr_batch``; returns the loss record.

    ``prepared`` may carry a precomputed ``(spec, lr_input)`` pair.
    """
    hr_batch = np.asarray(hr_batch, dtype=np.float32)
    if hr_batch.shape[0] != cfg.batch_size:
        raise ValueError(f"batch has {hr_batch.shape[0]} images, config says {cfg.batch_size}")
    if prepared is None:
        spec = step_resolution(cfg, step)
        lr_in = degrade(hr_batch, spec)
    else:
        spec, lr_in = prepared
    net.train()
    hr = Tensor(hr_batch)
    sr = net(lr_in)
    l_pix = pixel_loss(sr, hr)
    with no_grad():
        e_hr = embedder.embed(hr)
    if cfg.weights.embedding_weight > 0:
        e_sr = embedder.embed(sr)
        l_emb = embedding_loss(e_sr, e_hr)
    else:
        # reported but not optimized
        with no_grad():
            l_emb = embedding_loss(embedder.embed(Tensor(sr.data)), e_hr)
    l_total = total_loss(l_pix, l_emb, cfg.weights)
    l_total.backward()
    adam_step(net.parameters(), opt_state, step + 1, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    return ReportRow(step, spec.target_h, spec.target_w, float(l_pix.item()), float(l_emb.item()),
                     float(l_total.item()))


# -- checkpoints with optimizer state ----------------------------------------

def save_training_checkpoint(path, net, opt_state: AdamState, step: int, report: TrainReport, cfg: TrainConfig):
    extra = [(f"adam.m.{i}", m) for i, m in enumerate(opt_state.m)]
    extra += [(f"adam.v.{i}", v) for i, v in enumerate(opt_state.v)]
    extra.append(("train.report", report.to_array()))
    meta = {"train.step": str(step), "train.adam_t": str(opt_state.t), "train.seed": str(cfg.seed),
            "train.batch_size": str(cfg.batch_size)}
    ipunet.save_checkpoint(net, path, extra_meta=meta, extra_tensors=extra)


def load_training_checkpoint(path):
    """Return ``(net, opt_state, next_step, report)``."""
    net, meta, extras = ipunet.load_checkpoint_full(path)
    n = len(net.parameters())
    try:
        m = [extras[f"adam.m.{i}"] for i in range(n)]
        v = [extras[f"adam.v.{i}"] for i in range(n)]
        report = TrainReport.from_array(extras["train.report"])
        step = int(meta["train.step"])
        t = int(meta["train.adam_t"])
    except KeyError as exc:
        raise ValueError(f"{path} is not a training checkpoint (missing {exc})") from exc
    for p, mi in zip(net.parameters(), m):
        if mi.shape != p.shape:
            raise ValueError(f"{path}: optimizer state shape {mi.shape} does not match parameter {p.shape}")
    return net, AdamState(m, v, t), step, report


def train_loop(dataset, cfg: TrainConfig, embedder: Embedder, net: ipunet.IPUNet | None = None,
               net_config: ipunet.IPUNetConfig | None = None, checkpoint_dir=None, resume: str | Path | None = None,
               stop_after: int | None = None, progress=None):
    """Train for ``cfg.steps`` steps and return ``(net, report)``.

    ``dataset`` is an ``(M, C, 128, 128)`` array of aligned HR faces.
    ``stop_after`` ends the run early (after that many total steps) to
    simulate an interruption; checkpoints are written every
    ``cfg.checkpoint_every`` steps into ``checkpoint_dir`` as
    ``step_<k>.ckpt`` plus ``last.ckpt``.
    """
    dataset = np.asarray(dataset, dtype=np.float32)
    if dataset.ndim != 4 or len(dataset) == 0:
        raise ValueError("dataset must be a non-empty (M, C, H, W) array")
    if resume is not None:
        net, opt_state, start, report = load_training_checkpoint(resume)
    else:
        if net is None:
            net = ipunet.build(net_config or ipunet.IPUNetConfig(in_channels=dataset.shape[1]))
        opt_state = AdamState.zeros_like(net.parameters())
        start, report = 0, TrainReport()
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    steps = range(start, end)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    try:
        batches = pool.map(lambda s: prepare_batch(dataset, cfg, s), steps) if pool else (
            prepare_batch(dataset, cfg, s) for s in steps
        )
        for step, (spec, lr_in, hr) in zip(steps, batches):
            row = train_step(net, embedder, hr, cfg, step, opt_state, prepared=(spec, lr_in))
            report.append(row)
            if progress is not None:
                progress(row)
            done = step + 1
            if ckdir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_training_checkpoint(ckdir / f"step_{done}.ckpt", net, opt_state, done, report, cfg)
                save_training_checkpoint(ckdir / "last.ckpt", net, opt_state, done, report, cfg)
    finally:
        if pool is not None:
            pool.shutdown()
    if ckdir is not None:
        save_training_checkpoint(ckdir / "last.ckpt", net, opt_state, end if end > start else start, report, cfg)
    return net, report


def super_resolve(net: ipunet.IPUNet, images, batch_size=16) -> np.ndarray:
    """Eval-mode forward over an image array, no gradient recording."""
    images = np.asarray(images, dtype=np.float32)
    net.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(net(images[i : i + batch_size]).data)
    return np.concatenate(out) if out else images.copy()
