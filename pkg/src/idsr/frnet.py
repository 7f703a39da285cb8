"""Face-embedding networks used as the frozen identity critic.

Anything with ``input_size``, ``dim`` and ``embed(images) -> Tensor[N, dim]``
(unit-norm rows, differentiable w.r.t. the images) satisfies the
embedder contract. :class:`ToyEmbedder` is the in-process implementation.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .tensorcore import (
    Adam,
    Parameter,
    Tensor,
    conv2d,
    cross_entropy,
    global_avg_pool,
    l2_normalize,
    leaky_relu,
    linear,
    mul,
    no_grad,
    resize,
)

MAGIC = b"FREM"


class Embedder:
    """Base class; subclasses implement :meth:`embed`."""

    input_size: tuple = (64, 64)
    dim: int = 64

    def embed(self, images) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        return []

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _as_images(images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if x.ndim != 4:
        raise ValueError(f"embed expects an NCHW image batch, got shape {x.shape}")
    return x


class ToyEmbedder(Embedder):
    """Three stride-2 conv blocks, global average pool, linear projection, L2 norm."""

    def __init__(self, in_channels=3, widths=(16, 32, 64), dim=64, input_size=(64, 64), seed=0,
                 leaky_slope=0.2, dtype=np.float32):
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        self.dim = int(dim)
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.seed = int(seed)
        self.leaky_slope = float(leaky_slope)
        rng = np.random.default_rng([seed, 0xE3])
        self.convs = []
        cin = self.in_channels
        for w in self.widths:
            std = np.sqrt(2.0 / (cin * 9))
            self.convs.append(
                (
                    Parameter(rng.normal(0, std, (w, cin, 3, 3)).astype(dtype), trainable=False),
                    Parameter(np.zeros(w, dtype), trainable=False),
                )
            )
            cin = w
        self.proj_w = Parameter(rng.normal(0, np.sqrt(1.0 / cin), (self.dim, cin)).astype(dtype), trainable=False)
        self.proj_b = Parameter(np.zeros(self.dim, dtype), trainable=False)

    def parameters(self):
        out = []
        for w, b in self.convs:
            out += [w, b]
        return out + [self.proj_w, self.proj_b]

    def named_parameters(self):
        for i, (w, b) in enumerate(self.convs, 1):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b
        yield "proj.weight", self.proj_w
        yield "proj.bias", self.proj_b

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.trainable = flag
            p.requires_grad = flag
            p.zero_grad()

    def features(self, images) -> Tensor:
        """Un-normalized projection output."""
        x = _as_images(images)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"embedder expects {self.in_channels} channels, got {x.shape[1]}")
        if x.shape[2:] != self.input_size:
            x = resize(x, *self.input_size)
        for w, b in self.convs:
            x = leaky_relu(conv2d(x, w, b, stride=2, padding=1), self.leaky_slope)
        return linear(global_avg_pool(x), self.proj_w, self.proj_b)

    def embed(self, images) -> Tensor:
        return l2_normalize(self.features(images))

    def to_meta(self):
        return {
            "embedder": "toy",
            "in_channels": str(self.in_channels),
            "widths": ",".join(map(str, self.widths)),
            "dim": str(self.dim),
            "input_size": f"{self.input_size[0]}x{self.input_size[1]}",
            "seed": str(self.seed),
            "leaky_slope": repr(self.leaky_slope),
        }


def save_embedder(emb: ToyEmbedder, path) -> None:
    ckpt.write_checkpoint(path, MAGIC, emb.to_meta(), [(n, p.data) for n, p in emb.named_parameters()])


def load_embedder(path) -> ToyEmbedder:
    meta, tensors = ckpt.read_checkpoint(path, MAGIC)
    if meta.get("embedder") != "toy":
        raise ckpt.CheckpointFormatError(f"{path}: unknown embedder kind {meta.get('embedder')!r}")
    h, w = meta["input_size"].split("x")
    emb = ToyEmbedder(
        in_channels=int(meta["in_channels"]),
        widths=tuple(int(v) for v in meta["widths"].split(",")),
        dim=int(meta["dim"]),
        input_size=(int(h), int(w)),
        seed=int(meta["seed"]),
        leaky_slope=float(meta["leaky_slope"]),
    )
    expected = dict(emb.named_parameters())
    if set(expected) != set(tensors):
        raise ckpt.CheckpointManifestError(
            f"{path}: tensor names {sorted(tensors)} do not match embedder layout {sorted(expected)}"
        )
    for name, p in expected.items():
        if tensors[name].shape != p.shape:
            raise ckpt.CheckpointShapeError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data[...] = tensors[name]
    return emb


def embedding_distance(a, b) -> np.ndarray:
    """Per-row mean squared coordinate difference, shape ``(N,)``."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"embedding_distance: shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return (d * d).mean(axis=1)


def pretrain_embedder(emb: ToyEmbedder, images: np.ndarray, labels, steps=600, batch_size=32, lr=3e-3,
                      scale=16.0, seed=0, log=None) -> ToyEmbedder:
    """Fit ``emb`` as an identity classifier with a cosine-softmax head, then freeze it.

    ``images`` are resized once to the embedder input size. The head is
    discarded afterwards.
    """
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    images = np.asarray(images, dtype=np.float32)
    if images.shape[2:] != emb.input_size:
        from .resample import bicubic_resize

        images = bicubic_resize(images, *emb.input_size)
    rng = np.random.default_rng([seed, 0xF7])
    head = Parameter(rng.normal(0, 0.1, (len(classes), emb.dim)).astype(np.float32))
    emb.set_trainable(True)
    opt = Adam(emb.parameters() + [head], lr=lr)
    n = len(images)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        e = emb.embed(images[idx])
        logits = mul(linear(e, l2_normalize(head)), scale)
        loss = cross_entropy(logits, y[idx])
        loss.backward()
        opt.step()
        if log is not None and (step % 100 == 0 or step == steps - 1):
            log(f"embedder pretrain step {step} loss {loss.item():.4f}")
    emb.set_trainable(False)
    return emb


class LookupEmbedder(Embedder):
    """Oracle embedder: ignores pixels and returns a one-hot code per identity label.

    Used through :meth:`embed_labeled`; it exists to test evaluation code
    with perfectly identifying embeddings.
    """

    def __init__(self, labels):
        self.labels = list(dict.fromkeys(labels))
        self.dim = len(self.labels)
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def embed_labeled(self, images, labels) -> Tensor:
        out = np.zeros((len(labels), self.dim), np.float32)
        for row, lab in enumerate(labels):
            out[row, self._index[lab]] = 1.0
        return Tensor(out)

    def embed(self, images) -> Tensor:
        raise TypeError("LookupEmbedder needs labels; call embed_labeled")


# -- externally computed embeddings -------------------------------------------
# Record layout (little-endian): u32 id, u16 path byte length, UTF-8 path,
# u32 dim, dim x float32.

def write_embedding_records(path, records) -> None:
    """``records``: iterable of ``(id, image_path, vector)``."""
    with open(path, "wb") as fh:
        for rid, img_path, vec in records:
            p = str(img_path).encode("utf-8")
            v = np.ascontiguousarray(vec, dtype="<f4").ravel()
            fh.write(struct.pack("<IH", int(rid), len(p)))
            fh.write(p)
            fh.write(struct.pack("<I", v.size))
            fh.write(v.tobytes())


def read_embedding_records(path) -> list:
    raw = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(raw):
        if pos + 6 > len(raw):
            raise ValueError(f"{path}: truncated record header at byte {pos}")
        rid, plen = struct.unpack_from("<IH", raw, pos)
        pos += 6
        if pos + plen + 4 > len(raw):
            raise ValueError(f"{path}: truncated record {rid}")
        img_path = raw[pos : pos + plen].decode("utf-8")
        pos += plen
        (dim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + 4 * dim > len(raw):
            raise ValueError(f"{path}: truncated vector in record {rid}")
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += 4 * dim
        out.append((rid, img_path, vec))
    return out


def embed_batched(embedder: Embedder, images, batch_size=32) -> np.ndarray:
    """Embed a large array without recording gradients."""
    images = np.asarray(images, dtype=np.float32)
    chunks = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(embedder.embed(images[i : i + batch_size]).data)
    if not chunks:
        return np.zeros((0, embedder.dim), np.float32)
    return np.concatenate(chunks)
