"""Image I/O, dataset manifests and procedural synthetic faces.

Images are ``(C, H, W)`` float32 arrays in ``[0, 1]``; 8-bit files map
``byte -> byte / 255``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROLES = ("gallery", "probe", "train")
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["label", "role", "path", "camera", "distance"]
IDENTITY_DIM = 12
SYNTH_SIZE = 128


class ImageFormatError(ValueError):
    """Base class for undecodable image files."""


class UnsupportedImageFormat(ImageFormatError):
    pass


class CorruptImageHeader(ImageFormatError):
    pass


class TruncatedImage(ImageFormatError):
    pass


# -- image files -------------------------------------------------------------

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _read_pnm(raw: bytes, path) -> np.ndarray:
    magic = raw[:2]
    channels = {b"P5": 1, b"P6": 3}[magic]
    tokens = []
    pos = 2
    while len(tokens) < 3:
        # skip whitespace and comments
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptImageHeader(f"{path}: incomplete PNM header")
        tok = raw[start:pos]
        if not tok.isdigit():
            raise CorruptImageHeader(f"{path}: bad PNM header token {tok!r}")
        tokens.append(int(tok))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise CorruptImageHeader(f"{path}: PNM header not terminated")
    pos += 1
    w, h, maxval = tokens
    if w < 1 or h < 1:
        raise CorruptImageHeader(f"{path}: non-positive PNM size {w}x{h}")
    if maxval != 255:
        raise UnsupportedImageFormat(f"{path}: only 8-bit PNM (maxval 255) is supported, got {maxval}")
    need = w * h * channels
    data = raw[pos : pos + need]
    if len(data) < need:
        raise TruncatedImage(f"{path}: PNM pixel data truncated ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels)
    return arr.transpose(2, 0, 1)


def _read_png(raw: bytes, path) -> np.ndarray:
    from PIL import Image as PILImage

    try:
        with PILImage.open(io.BytesIO(raw)) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif mode == "RGBA":
                arr = np.asarray(im.convert("RGB"))
            else:
                raise UnsupportedImageFormat(f"{path}: unsupported PNG mode {mode}")
    except UnsupportedImageFormat:
        raise
    except OSError as exc:
        msg = str(exc)
        if "truncated" in msg.lower() or isinstance(exc, EOFError):
            raise TruncatedImage(f"{path}: {msg}") from exc
        raise CorruptImageHeader(f"{path}: {msg}") from exc
    except (SyntaxError, ValueError) as exc:
        raise CorruptImageHeader(f"{path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise UnsupportedImageFormat(f"{path}: only 8-bit PNG is supported")
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def decode_image(raw: bytes, path="<bytes>") -> np.ndarray:
    if raw.startswith(_PNG_SIG):
        if len(raw) < 33:
            raise TruncatedImage(f"{path}: PNG stream truncated")
        u8 = _read_png(raw, path)
    elif raw[:2] in (b"P5", b"P6"):
        u8 = _read_pnm(raw, path)
    elif raw[:4] == b"\x89PNG"[:4] or raw[:1] == b"P":
        raise CorruptImageHeader(f"{path}: damaged image header")
    else:
        raise UnsupportedImageFormat(f"{path}: not a PNG, PGM or PPM file")
    return (u8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Decode an 8-bit grayscale/RGB PNG or binary PGM/PPM to ``(C, H, W)`` floats."""
    return decode_image(Path(path).read_bytes(), path)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    """Write a ``(C, H, W)`` or ``(H, W)`` image; the format follows the suffix."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"save_image expects (1|3, H, W), got {img.shape}")
    u8 = to_bytes(img)
    c, h, w = u8.shape
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".ppm"):
        if (suffix == ".pgm") != (c == 1):
            raise ValueError(f"{suffix} cannot hold {c}-channel data")
        header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
        Path(path).write_bytes(header + u8.transpose(1, 2, 0).tobytes())
    elif suffix == ".png":
        from PIL import Image as PILImage

        arr = u8[0] if c == 1 else u8.transpose(1, 2, 0)
        PILImage.fromarray(arr, mode="L" if c == 1 else "RGB").save(path, format="PNG")
    else:
        raise UnsupportedImageFormat(f"cannot write {suffix!r} images")


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    label: str
    role: str
    path: Path
    camera: str = ""
    distance: str = ""


@dataclass
class DatasetManifest:
    records: list
    root: Path

    def by_role(self, role: str) -> list:
        return [r for r in self.records if r.role == role]

    def labels(self, role: str | None = None) -> list:
        seen = {}
        for r in self.records:
            if role is None or r.role == role:
                seen.setdefault(r.label, None)
        return list(seen)

    def load(self, role: str):
        """Return ``(records, images)`` for one role; images stacked to ``(N, C, H, W)``."""
        recs = self.by_role(role)
        if not recs:
            return recs, np.zeros((0, 0, 0, 0), np.float32)
        return recs, np.stack([load_image(r.path) for r in recs])


def write_manifest(path, records, root=None) -> None:
    root = Path(root) if root is not None else Path(path).parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            p = Path(r.path)
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
            w.writerow([r.label, r.role, p.as_posix(), r.camera, r.distance])


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a manifest CSV; relative image paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "role", "path"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs at least label,role,path columns")
        for lineno, row in enumerate(reader, start=2):
            label = (row.get("label") or "").strip()
            role = (row.get("role") or "").strip()
            if not label:
                raise ValueError(f"{path}:{lineno}: empty label")
            if role not in ROLES:
                raise ValueError(f"{path}:{lineno}: role must be one of {ROLES}, got {role!r}")
            p = Path(row["path"].strip())
            if not p.is_absolute():
                p = root / p
            if check_paths and not p.exists():
                raise FileNotFoundError(f"{path}:{lineno}: image {p} does not exist")
            records.append(
                ManifestRecord(label, role, p, (row.get("camera") or "").strip(), (row.get("distance") or "").strip())
            )
    return DatasetManifest(records, root)


# -- synthetic identities ----------------------------------------------------

@dataclass(frozen=True)
class SyntheticIdentity:
    """Identity factors, each in [0, 1]:

    0 face half-width, 1 face half-height, 2 face vertical offset,
    3 eye spacing, 4 eye size, 5 eye height, 6 brow angle,
    7 mouth curvature, 8 mouth width, 9 skin tone, 10 background tone,
    11 hair line.
    """

    params: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.params)
        if len(p) != IDENTITY_DIM:
            raise ValueError(f"identity needs {IDENTITY_DIM} parameters, got {len(p)}")
        if any(not 0.0 <= v <= 1.0 for v in p):
            raise ValueError("identity parameters must lie in [0, 1]")
        object.__setattr__(self, "params", p)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "SyntheticIdentity":
        return cls(tuple(rng.random(IDENTITY_DIM)))


def _lerp(lo, hi, t):
    return lo + (hi - lo) * t


def _soft(sd, width=1.0):
    """Coverage of a shape from its signed distance (negative inside)."""
    return 0.5 * (1.0 - np.tanh(sd / width))


def render_synthetic(identity: SyntheticIdentity, nuisance_seed, channels: int = 3, size: int = SYNTH_SIZE) -> np.ndarray:
    """Rasterize a face-like image for ``identity`` under seeded nuisance.

    Nuisance: global illumination gain, a linear shading ramp, sub-pixel
    translation of up to 3 px, and pixel noise.
    """
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    p = identity.params
    rng = np.random.default_rng(nuisance_seed)
    gain = rng.uniform(0.88, 1.12)
    ramp_angle = rng.uniform(0, 2 * np.pi)
    ramp_amp = rng.uniform(0.0, 0.06)
    dx, dy = rng.uniform(-3.0, 3.0, size=2)
    s = size / 128.0

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + dx * s
    cy = size / 2 + (_lerp(-6, 6, p[2]) + dy) * s
    u, v = xx - cx, yy - cy

    fw, fh = _lerp(30, 46, p[0]) * s, _lerp(38, 54, p[1]) * s
    r = np.sqrt((u / fw) ** 2 + (v / fh) ** 2)
    face = _soft((r - 1.0) * min(fw, fh), 1.2 * s)

    # hair: the top of the oval above a parameterized line
    hair_y = -fh * _lerp(0.45, 0.85, p[11])
    hair = face * _soft(v - hair_y, 2.0 * s)

    eye_dx = _lerp(11, 21, p[3]) * s
    eye_r = _lerp(3.0, 7.5, p[4]) * s
    eye_y = -_lerp(6, 18, p[5]) * s
    eyes = np.zeros_like(u)
    brows = np.zeros_like(u)
    ang = _lerp(-0.45, 0.45, p[6])
    for side in (-1.0, 1.0):
        ex, ey = u - side * eye_dx, v - eye_y
        eyes = np.maximum(eyes, _soft(np.sqrt((ex / 1.3) ** 2 + ey**2) - eye_r, 0.8 * s))
        # brow: thin bar above the eye, tilted symmetrically
        bx = ex
        by = v - (eye_y - eye_r - 4.0 * s) - side * np.tan(ang) * bx
        bar = np.maximum(np.abs(bx) - eye_r * 1.6, np.abs(by) - 1.3 * s)
        brows = np.maximum(brows, _soft(bar, 0.8 * s))

    mouth_y = _lerp(16, 26, p[5]) * s
    mw = _lerp(7, 19, p[8]) * s
    curv = _lerp(-0.06, 0.06, p[7]) / s
    m_center = mouth_y + curv * (u**2 - mw**2 / 2)
    mouth = _soft(np.maximum(np.abs(u) - mw, np.abs(v - m_center) - 1.6 * s), 0.8 * s)

    skin = _lerp(0.5, 0.9, p[9])
    bg = _lerp(0.05, 0.4, p[10])
    hair_tone = 0.35 * skin
    lum = bg * (1 - face) + face * skin
    lum = lum * (1 - hair) + hair * hair_tone
    lum = lum * (1 - eyes) + eyes * 0.12
    lum = lum * (1 - brows) + brows * (0.6 * hair_tone)
    lum = lum * (1 - mouth) + mouth * (0.55 * skin)

    if channels == 3:
        # skin and background hues are tied to the identity tones
        tint_skin = np.array([1.0, _lerp(0.72, 0.88, p[9]), _lerp(0.55, 0.75, p[9])])
        tint_bg = np.array([_lerp(0.6, 1.0, p[10]), 0.85, _lerp(1.0, 0.6, p[10])])
        skin_mask = face * (1 - hair) * (1 - eyes) * (1 - brows)
        img = lum[None] * (skin_mask[None] * tint_skin[:, None, None] + (1 - face)[None] * tint_bg[:, None, None]
                           + (1 - skin_mask - (1 - face))[None] * 0.85)
    else:
        img = lum[None]

    shade = 1.0 + ramp_amp * ((np.cos(ramp_angle) * u + np.sin(ramp_angle) * v) / (size / 2))
    img = img * gain * shade[None]
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def identity_for(seed: int, index: int) -> SyntheticIdentity:
    return SyntheticIdentity.random(np.random.default_rng([seed, 0, index]))


def make_synthetic_dataset(out_dir, num_identities: int, images_per_identity: int, seed: int, channels: int = 3,
                           ext: str = ".png") -> DatasetManifest:
    """Render a dataset to ``out_dir`` and write ``manifest.csv``.

    Per identity, image 0 is the gallery entry, image 1 the probe and
    the rest are training images.
    """
    if num_identities < 1 or images_per_identity < 1:
        raise ValueError("identity and image counts must be positive")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    records = []
    for i in range(num_identities):
        ident = identity_for(seed, i)
        label = f"id{i:03d}"
        for j in range(images_per_identity):
            img = render_synthetic(ident, (seed, 1, i, j), channels)
            path = out / f"{label}_{j:02d}{ext}"
            save_image(path, img)
            role = "gallery" if j == 0 else "probe" if j == 1 else "train"
            records.append(ManifestRecord(label, role, path))
    write_manifest(out / MANIFEST_NAME, records, out)
    return DatasetManifest(records, out)


def synthetic_arrays(num_identities: int, images_per_identity: int, seed: int, channels: int = 1,
                     first_image: int = 0, quantize: bool = True):
    """In-memory variant of :func:`make_synthetic_dataset`.

    Returns ``(labels, images)``; ``quantize`` applies the 8-bit round
    trip so arrays equal what the on-disk dataset would decode to.
    """
    labels, imgs = [], []
    for i in range(num_identities):
        ident = identity_for(seed, i)
        for j in range(first_image, first_image + images_per_identity):
            img = render_synthetic(ident, (seed, 1, i, j), channels)
            if quantize:
                img = to_bytes(img).astype(np.float32) / np.float32(255.0)
            imgs.append(img)
            labels.append(i)
    return np.asarray(labels), np.stack(imgs).astype(np.float32)
