"""Closed-set identification: gallery/probe matching, CMC curves and protocol runners."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frnet import Embedder, embed_batched
from .resample import AR_PROBE_RESOLUTIONS, DegradationSpec, bicubic_resize, degrade
from .trainer import super_resolve


@dataclass
class Gallery:
    labels: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.labels = list(self.labels)
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if len(self.labels) != len(self.embeddings):
            raise ValueError("gallery labels and embeddings differ in length")
        if not self.labels:
            raise ValueError("gallery is empty")

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def identities(self):
        return list(dict.fromkeys(self.labels))


@dataclass
class ProbeSet:
    labels: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.labels = list(self.labels)
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if len(self.labels) != len(self.embeddings):
            raise ValueError("probe labels and embeddings differ in length")


@dataclass
class CMCCurve:
    accuracies: np.ndarray

    @property
    def max_rank(self):
        return len(self.accuracies)

    def rank(self, k: int) -> float:
        return float(self.accuracies[k - 1])

    def __getitem__(self, i):
        return self.accuracies[i]


def _sq_distances(probe: np.ndarray, gallery: Gallery) -> np.ndarray:
    if probe.shape[-1] != gallery.dim:
        raise ValueError(f"probe dim {probe.shape[-1]} != gallery dim {gallery.dim}")
    diff = gallery.embeddings - probe
    return np.einsum("gd,gd->g", diff, diff)


def match_probe(probe, gallery: Gallery) -> list:
    """Gallery identities ordered by their best entry's Euclidean distance.

    Ties resolve in gallery insertion order.
    """
    probe = np.asarray(probe, dtype=np.float64).ravel()
    order = np.argsort(_sq_distances(probe, gallery), kind="stable")
    ranked, seen = [], set()
    for i in order:
        lab = gallery.labels[i]
        if lab not in seen:
            seen.add(lab)
            ranked.append(lab)
    return ranked


def _check_closed_set(gallery: Gallery, probes: ProbeSet):
    known = set(gallery.labels)
    for lab in probes.labels:
        if lab not in known:
            raise ValueError(f"probe identity {lab!r} is not in the gallery (closed-set evaluation)")


def identity_ranks(gallery: Gallery, probes: ProbeSet) -> np.ndarray:
    """1-based rank of each probe's true identity."""
    _check_closed_set(gallery, probes)
    ranks = np.empty(len(probes.labels), dtype=np.int64)
    for i, (lab, emb) in enumerate(zip(probes.labels, probes.embeddings)):
        ranks[i] = match_probe(emb, gallery).index(lab) + 1
    return ranks


def cmc(gallery: Gallery, probes: ProbeSet, max_rank: int = 100) -> CMCCurve:
    """Fraction of probes whose identity is within the top-k, for k = 1..max_rank."""
    if max_rank < 1:
        raise ValueError("max_rank must be positive")
    ranks = identity_ranks(gallery, probes)
    if len(ranks) == 0:
        raise ValueError("probe set is empty")
    hits = np.bincount(np.minimum(ranks, max_rank + 1), minlength=max_rank + 2)[1 : max_rank + 1]
    return CMCCurve(np.cumsum(hits) / len(ranks))


def rank1(gallery: Gallery, probes: ProbeSet) -> float:
    return cmc(gallery, probes, 1).rank(1)


def concat_embedding(e_sr, e_bicubic) -> np.ndarray:
    """Join SR and bicubic embeddings along the last axis (no renormalization)."""
    e_sr, e_bicubic = np.asarray(e_sr), np.asarray(e_bicubic)
    if e_sr.shape != e_bicubic.shape:
        raise ValueError(f"concat_embedding: shape mismatch {e_sr.shape} vs {e_bicubic.shape}")
    return np.concatenate([e_sr, e_bicubic], axis=-1)


# -- protocols -----------------------------------------------------------------

@dataclass
class ProtocolSpec:
    """Evaluation protocol.

    ``mode="ar"``: probes are HR images degraded to each resolution in
    ``probe_resolutions``. ``mode="scface"``: probes are natural LR images,
    resized to ``preprocess_size`` then bicubic-upsampled to the network
    size, and results are grouped by the manifest ``group_by`` column.
    """

    name: str = "ar"
    mode: str = "ar"
    probe_resolutions: tuple = AR_PROBE_RESOLUTIONS
    max_rank: int = 100
    concat_embeddings: bool = False
    network_size: tuple = (128, 128)
    preprocess_size: tuple = (64, 64)
    group_by: str = "distance"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("ar", "scface"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if self.max_rank < 1:
            raise ValueError("max_rank must be positive")


def _parse_size(text):
    s = DegradationSpec.parse(text)
    return (s.target_h, s.target_w)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"bad boolean {text!r}")


def parse_protocol(text: str) -> ProtocolSpec:
    """Parse ``key=value`` protocol text; ``#`` starts a comment."""
    kw, extra = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"protocol line {lineno}: expected key=value, got {line!r}")
        key, value = key.strip(), value.strip()
        if key in ("name", "mode", "group_by"):
            kw[key] = value
        elif key == "probe_resolutions":
            kw[key] = tuple(DegradationSpec.parse(v) for v in value.split(",") if v.strip())
        elif key == "max_rank":
            kw[key] = int(value)
        elif key == "concat_embeddings":
            kw[key] = _parse_bool(value)
        elif key in ("network_size", "preprocess_size"):
            kw[key] = _parse_size(value)
        else:
            extra[key] = value
    return ProtocolSpec(extra=extra, **kw)


def format_protocol(spec: ProtocolSpec) -> str:
    lines = [
        f"name={spec.name}",
        f"mode={spec.mode}",
        f"probe_resolutions={','.join(str(r) for r in spec.probe_resolutions)}",
        f"max_rank={spec.max_rank}",
        f"concat_embeddings={'true' if spec.concat_embeddings else 'false'}",
        f"network_size={spec.network_size[0]}x{spec.network_size[1]}",
        f"preprocess_size={spec.preprocess_size[0]}x{spec.preprocess_size[1]}",
        f"group_by={spec.group_by}",
    ]
    lines += [f"{k}={v}" for k, v in spec.extra.items()]
    return "\n".join(lines) + "\n"


def load_protocol(path) -> ProtocolSpec:
    return parse_protocol(Path(path).read_text())


@dataclass
class ProtocolResult:
    spec: ProtocolSpec
    curves: dict  # condition name -> CMCCurve
    embedding_dim: int
    method: str = "ipunet"

    def rank1_table(self) -> dict:
        return {cond: curve.rank(1) for cond, curve in self.curves.items()}

    def write_cmc_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["resolution", "rank", "accuracy"])
            for cond, curve in self.curves.items():
                for k, acc in enumerate(curve.accuracies, 1):
                    w.writerow([cond, k, repr(float(acc))])

    def write_rank1_csv(self, path):
        conds = list(self.curves)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method"] + conds)
            w.writerow([self.method] + [repr(self.curves[c].rank(1)) for c in conds])


def _pipeline_embeddings(net, embedder: Embedder, images, labels, concat: bool):
    """SR (when a net is given) then embed; with ``concat`` append the bicubic-input embedding."""
    def emb(x):
        if hasattr(embedder, "embed_labeled"):
            return embedder.embed_labeled(x, labels).data
        return embed_batched(embedder, x)

    sr = super_resolve(net, images) if net is not None else images
    e = emb(sr)
    if concat:
        e = concat_embedding(e, emb(images))
    return e


def run_protocol(spec: ProtocolSpec, net, embedder: Embedder, gallery_images, gallery_labels, probe_images,
                 probe_labels, probe_groups=None, method="ipunet") -> ProtocolResult:
    """Evaluate one protocol. ``net=None`` evaluates the bicubic baseline.

    Gallery images pass through the same SR pipeline as probes when
    ``concat_embeddings`` is set, so both sides share the 2*dim layout.
    """
    missing = sorted(set(probe_labels) - set(gallery_labels))
    if missing:
        raise ValueError(f"probe identity {missing[0]!r} is not in the gallery (closed-set evaluation)")
    nh, nw = spec.network_size
    gal = np.asarray(gallery_images, dtype=np.float32)
    probes = np.asarray(probe_images, dtype=np.float32)
    if spec.mode == "scface":
        gal = bicubic_resize(bicubic_resize(gal, *spec.preprocess_size), nh, nw)
    elif gal.shape[-2:] != (nh, nw):
        gal = bicubic_resize(gal, nh, nw)
    if spec.concat_embeddings:
        g_emb = _pipeline_embeddings(net, embedder, gal, gallery_labels, True)
    else:
        g_emb = _pipeline_embeddings(None, embedder, gal, gallery_labels, False)
    gallery = Gallery(gallery_labels, g_emb)
    max_rank = min(spec.max_rank, len(gallery.identities()))

    curves = {}
    if spec.mode == "ar":
        if probes.shape[-2:] != (nh, nw):
            probes = bicubic_resize(probes, nh, nw)
        for res in spec.probe_resolutions:
            x = degrade(probes, res, size=(nh, nw))
            p_emb = _pipeline_embeddings(net, embedder, x, probe_labels, spec.concat_embeddings)
            curves[str(res)] = cmc(gallery, ProbeSet(probe_labels, p_emb), max_rank)
    else:
        groups = list(probe_groups) if probe_groups is not None else ["all"] * len(probe_labels)
        x = bicubic_resize(bicubic_resize(probes, *spec.preprocess_size), nh, nw)
        p_emb = _pipeline_embeddings(net, embedder, x, probe_labels, spec.concat_embeddings)
        for g in dict.fromkeys(groups):
            sel = [i for i, gi in enumerate(groups) if gi == g]
            curves[str(g)] = cmc(gallery, ProbeSet([probe_labels[i] for i in sel], p_emb[sel]), max_rank)
    return ProtocolResult(spec, curves, gallery.dim, method)


def run_protocol_on_manifest(spec: ProtocolSpec, net, embedder: Embedder, manifest, method="ipunet"):
    g_recs, g_imgs = manifest.load("gallery")
    p_recs, p_imgs = manifest.load("probe")
    if not g_recs or not p_recs:
        raise ValueError("manifest needs gallery and probe rows")
    groups = [getattr(r, spec.group_by, "") or "all" for r in p_recs] if spec.mode == "scface" else None
    return run_protocol(spec, net, embedder, g_imgs, [r.label for r in g_recs], p_imgs,
                        [r.label for r in p_recs], groups, method)


def evaluate_embeddings(gallery_labels, gallery_emb, probe_labels, probe_emb, max_rank=100) -> CMCCurve:
    """CMC directly from precomputed embeddings (e.g. an external recognizer)."""
    gallery = Gallery(gallery_labels, gallery_emb)
    return cmc(gallery, ProbeSet(probe_labels, probe_emb), min(max_rank, len(gallery.identities())))
