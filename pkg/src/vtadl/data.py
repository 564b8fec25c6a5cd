"""Dataset ingestion (IDX, PGM/PPM directories) and a synthetic defect generator."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

NORMAL, ANOMALOUS = 0, 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [H, W, C] in [-1, 1]
    label: int = NORMAL
    mask: np.ndarray | None = None  # [H, W] bool
    name: str = ""


# -- IDX --------------------------------------------------------------------
def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    payload = struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0


def load_idx(images_path, labels_path, normal_digit: int | None = None) -> list[Sample]:
    """Read an IDX image/label pair. With ``normal_digit`` set, that digit is normal and the rest anomalous."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected 3 image dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    out = []
    for i, (img, digit) in enumerate(zip(images, labels)):
        lab = NORMAL if normal_digit is None or digit == normal_digit else ANOMALOUS
        out.append(Sample(to_unit_range(img)[..., None], lab, None, f"{i}:{int(digit)}"))
    return out


def pad_to(image: np.ndarray, height: int, width: int, value: float = -1.0) -> np.ndarray:
    h, w = image.shape[:2]
    top, left = (height - h) // 2, (width - w) // 2
    pad = [(top, height - h - top), (left, width - w - left)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, constant_values=value)


# -- PGM / PPM ----------------------------------------------------------------
def _pnm_tokens(raw: bytes, count: int):
    pos, tokens = 2, []
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Decode a binary P5 (gray) or P6 (RGB) image with maxval <= 255 into ``uint8 [H, W, C]``."""
    raw = Path(path).read_bytes()
    sig = raw[:2]
    if sig not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image signature {sig!r}")
    (w, h, maxval), start = _pnm_tokens(raw, 3)
    if maxval > 255:
        raise DataError(f"{path}: maxval {maxval} unsupported")
    c = 1 if sig == b"P5" else 3
    n = w * h * c
    if len(raw) - start < n:
        raise DataError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8, count=n, offset=start).reshape(h, w, c)
    if maxval != 255:
        img = np.rint(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_pnm(path, image: np.ndarray) -> None:
    a = np.asarray(image, dtype=np.uint8)
    if a.ndim == 2:
        a = a[..., None]
    sig = {1: "P5", 3: "P6"}[a.shape[2]]
    Path(path).write_bytes(f"{sig}\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an ``[H, W, C]`` float array."""
    from .metrics import _axis_weights

    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] == (height, width):
        return img
    r0, r1, fr = _axis_weights(img.shape[0], height)
    c0, c1, fc = _axis_weights(img.shape[1], width)
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def center_crop(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    if height > h or width > w:
        raise DataError(f"crop {height}x{width} larger than image {h}x{w}")
    top, left = (h - height) // 2, (w - width) // 2
    return image[top:top + height, left:left + width]


@dataclass
class Preprocess:
    """Resize (short side to ``resize``, or exact when ``resize`` is a pair) then center crop."""

    resize: int | Sequence[int] | None = None
    crop: int | Sequence[int] | None = None

    def __call__(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if self.resize is not None:
            if isinstance(self.resize, int):
                h, w = img.shape[:2]
                s = self.resize / min(h, w)
                size = (int(round(h * s)), int(round(w * s)))
            else:
                size = tuple(self.resize)
            img = resize_bilinear(img, *size)
        if self.crop is not None:
            ch, cw = (self.crop, self.crop) if isinstance(self.crop, int) else tuple(self.crop)
            img = center_crop(img, ch, cw)
        return img


MVTEC_POLICY = Preprocess(resize=550, crop=512)
# BTAD products come in several aspect ratios; the short side is scaled to 512 before cropping
BTAD_POLICY = Preprocess(resize=512, crop=512)


def load_image_dir(root, split: str, preprocess: Preprocess | None = None) -> list[Sample]:
    """Load an MVTec-style tree: ``train/good``, ``test/<defect>``, ``ground_truth/<defect>``.

    Files are visited in lexicographic path order. Masks are matched by stem
    (``<stem>.pgm`` or ``<stem>_mask.pgm``) and binarized at 0.5.
    """
    root = Path(root)
    preprocess = preprocess or Preprocess()
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    base = root / split
    if not base.is_dir():
        raise DataError(f"missing directory {base}")
    samples = []
    for cat in sorted(p for p in base.iterdir() if p.is_dir()):
        if split == "train" and cat.name != "good":
            raise DataError(f"train split may only contain 'good' images, found {cat.name!r}")
        for f in sorted(cat.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            img = preprocess(read_pnm(f)) / 127.5 - 1.0
            if cat.name == "good":
                mask = np.zeros(img.shape[:2], bool) if split == "test" else None
                samples.append(Sample(img.astype(np.float32), NORMAL, mask, str(f.relative_to(root))))
                continue
            gt_dir = root / "ground_truth" / cat.name
            cands = [gt_dir / f"{f.stem}{s}" for s in ("_mask.pgm", ".pgm")]
            mpath = next((c for c in cands if c.exists()), None)
            if mpath is None:
                raise DataError(f"missing ground-truth mask for anomalous image {f}")
            m = preprocess(read_pnm(mpath)[..., :1] / 255.0)[..., 0] >= 0.5
            samples.append(Sample(img.astype(np.float32), ANOMALOUS, m, str(f.relative_to(root))))
    if split == "train":
        check_normal_only(samples)
    return samples


def check_normal_only(samples: Sequence[Sample]) -> None:
    bad = [s.name for s in samples if s.label != NORMAL]
    if bad:
        raise DataError(f"train split contains {len(bad)} anomalous samples (first: {bad[0]})")


# -- synthetic defects --------------------------------------------------------
@dataclass
class SyntheticConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 100
    defect_kinds: tuple[str, ...] = ("blob", "scratch")
    seed: int = 0

    def __post_init__(self):
        self.defect_kinds = tuple(self.defect_kinds)
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise DataError(f"synthetic size {self.height}x{self.width} must be a positive multiple of 32")
        unknown = set(self.defect_kinds) - {"blob", "scratch"}
        if unknown or not self.defect_kinds:
            raise DataError(f"unknown defect kinds {sorted(unknown)}")

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        return cls(**json.loads(text))


def _philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


class SyntheticTexture:
    """Texture family: 2-4 sinusoidal gratings whose frequencies are fixed per dataset seed.

    Each image redraws the grating phases and jitters the amplitudes, then adds
    Gaussian noise with standard deviation 0.05.
    """

    AMPLITUDE = 0.45
    NOISE = 0.05
    LIMIT = 0.6

    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        rng = _philox(cfg.seed, 0)
        n = int(rng.integers(2, 5))
        angles = rng.uniform(0, np.pi, n)
        periods = rng.uniform(6.0, 20.0, n)
        self.freqs = np.stack([np.cos(angles), np.sin(angles)], 1) * (2 * np.pi / periods)[:, None]
        self.amps = rng.uniform(0.5, 1.0, n)
        yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
        self.coords = np.stack([yy, xx], -1)

    def render(self, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        out = np.zeros((cfg.height, cfg.width, cfg.channels))
        for f, a in zip(self.freqs, self.amps):
            phase = rng.uniform(0, 2 * np.pi, cfg.channels)
            amp = a * rng.uniform(0.8, 1.2)
            out += amp * np.sin((self.coords @ f)[..., None] + phase)
        out *= self.AMPLITUDE / self.amps.sum()
        out += self.NOISE * rng.standard_normal(out.shape)
        return np.clip(out, -self.LIMIT, self.LIMIT)


def _ellipse(rng, h, w):
    cy, cx = rng.uniform(6, h - 6), rng.uniform(6, w - 6)
    ry, rx = rng.uniform(2.5, 7.0), rng.uniform(2.5, 7.0)
    t = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(t) + dx * np.sin(t)
    v = -dy * np.sin(t) + dx * np.cos(t)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _scratch(rng, h, w):
    m = np.zeros((h, w), bool)
    y, x = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
    heading = rng.uniform(0, 2 * np.pi)
    for _ in range(int(rng.integers(2, 4))):
        length = rng.uniform(8, 20)
        heading += rng.uniform(-0.8, 0.8)
        y1 = np.clip(y + length * np.sin(heading), 0, h - 1)
        x1 = np.clip(x + length * np.cos(heading), 0, w - 1)
        steps = int(max(abs(y1 - y), abs(x1 - x))) + 1
        for s in np.linspace(0, 1, steps + 1):
            m[int(round(y + s * (y1 - y))), int(round(x + s * (x1 - x)))] = True
        y, x = y1, x1
    return m


def defect_mask(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """1-3 defects whose union has between 1 and 5 connected regions of >= 16 pixels each."""
    from .metrics import EIGHT_CONNECTED

    while True:
        m = np.zeros((cfg.height, cfg.width), bool)
        for _ in range(int(rng.integers(1, 4))):
            kind = cfg.defect_kinds[int(rng.integers(len(cfg.defect_kinds)))]
            m |= _ellipse(rng, cfg.height, cfg.width) if kind == "blob" else _scratch(rng, cfg.height, cfg.width)
        lab, n = ndimage.label(m, structure=EIGHT_CONNECTED)
        sizes = np.bincount(lab.ravel())[1:]
        if 1 <= n <= 5 and sizes.min() >= 16:
            return m


def apply_defect(clean: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    shift = rng.uniform(0.4, 0.9) * (1.0 if rng.random() < 0.5 else -1.0)
    out = clean.copy()
    out[mask] = np.clip(out[mask] + shift, -1.0, 1.0)
    return out


def generate_synthetic(cfg: SyntheticConfig, seed: int | None = None) -> tuple[list[Sample], list[Sample]]:
    """Deterministic (train, test) splits. Every image has its own Philox stream keyed by (seed, split, index)."""
    if seed is not None and seed != cfg.seed:
        cfg = SyntheticConfig(**{**cfg.__dict__, "seed": seed})
    tex = SyntheticTexture(cfg)
    train = [Sample(tex.render(_philox(cfg.seed, 1, i)).astype(np.float32), NORMAL, None, f"train/{i}")
             for i in range(cfg.n_train)]
    test = []
    for i in range(cfg.n_test_normal):
        img = tex.render(_philox(cfg.seed, 2, i)).astype(np.float32)
        test.append(Sample(img, NORMAL, np.zeros((cfg.height, cfg.width), bool), f"test/good/{i}"))
    for i in range(cfg.n_test_anomalous):
        clean, defect = render_anomalous(tex, cfg, i)
        test.append(Sample(defect[0].astype(np.float32), ANOMALOUS, defect[1], f"test/defect/{i}"))
    return train, test


def render_anomalous(tex: SyntheticTexture, cfg: SyntheticConfig, index: int):
    """Return the defect-free rendering and ``(defective image, mask)`` for test index ``index``."""
    clean = tex.render(_philox(cfg.seed, 3, index))
    rng = _philox(cfg.seed, 4, index)
    mask = defect_mask(rng, cfg)
    return clean, (apply_defect(clean, mask, rng), mask)


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` split into batches; the last partial batch is kept."""
    order = _philox(seed, 100, epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
