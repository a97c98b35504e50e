"""Procedural multi-domain image benchmark, pair sampling, and image/manifest I/O.

Every image is ``style(domain) + shape(class) + noise``. The class decides
only the geometry of the foreground object (bars, a disk, or a checker
tile); the domain decides only the look (oriented band-limited texture,
per-channel gain, smooth background ramp). Labels and domains are crossed
in a balanced design, so style carries no label information.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream
from .spectral import ComplexSpectrum, fft2, ifft2

__all__ = [
    "SpecError",
    "SamplingError",
    "ImageFormatError",
    "DomainStyle",
    "DomainShiftSpec",
    "LabeledExample",
    "Split",
    "DatasetBundle",
    "domain_style",
    "render_example",
    "generate_dataset",
    "sample_pair",
    "sample_partners",
    "band_energy",
    "write_image",
    "read_image",
    "write_manifest",
    "read_manifest",
]


class SpecError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class ImageFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DomainStyle:
    texture_freq: tuple[float, float]  # (fu, fv) centre in cycles per image
    texture_power: float
    gain: tuple[float, float, float]
    ramp_angle: float
    ramp_strength: float
    base: float


@dataclass(frozen=True)
class DomainShiftSpec:
    num_classes: int = 3
    channels: int = 3
    image_size: int = 32
    n_train: int = 100  # per (class, source domain)
    n_id_test: int = 50  # per (class, source domain)
    n_ood_test: int = 100  # per (class, target domain)
    n_unlabeled: int = 100  # per target domain
    noise_floor: float = 0.04
    contrast: float = 0.35
    texture_bandwidth: float = 0.8
    source_texture_power: float = 0.08
    target_texture_power: float = 0.16
    texture_radius: float = 4.0
    gain_spread: float = 0.25
    target_gain_spread: float = 0.45
    ramp_strength: float = 0.15
    style_seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 3:
            raise SpecError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.channels not in (1, 3):
            raise SpecError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size < 8:
            raise SpecError(f"image_size must be >= 8, got {self.image_size}")
        for name in ("n_train", "n_id_test", "n_ood_test", "n_unlabeled"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")


@dataclass
class LabeledExample:
    image: np.ndarray
    label: int
    domain: int


@dataclass
class Split:
    images: np.ndarray  # N x C x H x W
    labels: np.ndarray  # -1 where unlabeled
    domains: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]), int(self.domains[i]))

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.intp)
        return Split(self.images[idx], self.labels[idx], self.domains[idx])

    @staticmethod
    def concat(parts: list["Split"]) -> "Split":
        return Split(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domains for p in parts]),
        )


@dataclass
class DatasetBundle:
    train: Split
    target_unlabeled: Split
    id_test: Split
    ood_test: Split
    source_domains: tuple[int, ...] = ()
    target_domains: tuple[int, ...] = ()
    spec: DomainShiftSpec = field(default_factory=DomainShiftSpec)


def domain_style(spec: DomainShiftSpec, d: int, target: bool) -> DomainStyle:
    """Style of domain ``d``; texture orientations are spread over the half plane."""
    rng = stream(spec.style_seed, "domain_style", d)
    angle = np.pi * (d % 6) / 6 + rng.uniform(-0.05, 0.05)
    radius = spec.texture_radius * (1.0 if d % 2 == 0 else 0.7)
    fu, fv = radius * np.cos(angle), radius * np.sin(angle)
    spread = spec.target_gain_spread if target else spec.gain_spread
    gain = tuple(float(g) for g in np.clip(1.0 + rng.uniform(-spread, spread, size=3), 0.2, 1.8))
    return DomainStyle(
        texture_freq=(float(fu), float(fv)),
        texture_power=spec.target_texture_power if target else spec.source_texture_power,
        gain=gain,
        ramp_angle=float(rng.uniform(0, 2 * np.pi)),
        ramp_strength=float(spec.ramp_strength * rng.uniform(0.5, 1.0)),
        base=float(rng.uniform(0.35, 0.5)),
    )


def _signed_freqs(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n).astype(float)


def _texture(size: int, style: DomainStyle, bandwidth: float, rng: np.random.Generator) -> np.ndarray:
    fu = _signed_freqs(size)[:, None]
    fv = _signed_freqs(size)[None, :]
    cu, cv = style.texture_freq
    bump = np.exp(-((fu - cu) ** 2 + (fv - cv) ** 2) / (2 * bandwidth**2))
    bump += np.exp(-((fu + cu) ** 2 + (fv + cv) ** 2) / (2 * bandwidth**2))
    # the Nyquist row/column is its own mirror, so enforce B(k) = B(-k) on the grid
    bump = 0.5 * (bump + np.roll(bump[::-1, ::-1], 1, axis=(0, 1)))
    white = rng.standard_normal((size, size))
    spec = fft2(white)
    t = ifft2(ComplexSpectrum(spec.re * bump, spec.im * bump, True))
    return t / (t.std() + 1e-12)


def _shape_mask(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    extent = rng.uniform(0.22, 0.32) * size
    if label == 0:
        # three parallel bars, random orientation
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        period = extent / 1.5
        bars = (np.abs(((u / period) % 1.0) - 0.5) < 0.22) & (np.abs(u) < 1.5 * period)
        return (bars & (np.abs(v) < extent)).astype(float)
    if label == 1:
        return ((yy - cy) ** 2 + (xx - cx) ** 2 < extent**2).astype(float)
    tile = max(2.0, extent / 2)
    inside = (np.abs(yy - cy) < extent) & (np.abs(xx - cx) < extent)
    check = ((np.floor((yy - cy) / tile) + np.floor((xx - cx) / tile)) % 2) == 0
    return (inside & check).astype(float)


def render_example(spec: DomainShiftSpec, label: int, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(float) / n - 0.5
    ramp = style.ramp_strength * (np.cos(style.ramp_angle) * xx + np.sin(style.ramp_angle) * yy)
    tex = style.texture_power * _texture(n, style, spec.texture_bandwidth, rng)
    obj = spec.contrast * _shape_mask(label, n, rng)
    background = style.base + ramp + tex
    img = np.empty((spec.channels, n, n))
    gains = style.gain if spec.channels == 3 else (float(np.mean(style.gain)),)
    for c, g in enumerate(gains):
        img[c] = g * (background + obj)
    img += spec.noise_floor * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(spec, domains, count, seed, split_name, targets, labeled=True) -> Split:
    images, labels, doms = [], [], []
    classes = range(spec.num_classes) if labeled else [None]
    for d in domains:
        style = domain_style(spec, d, d in targets)
        for y in classes:
            for i in range(count):
                # unlabeled target images still need a class object; draw it from the stream
                rng = stream(seed, f"example/{split_name}", d, 0 if y is None else y + 1, i)
                cls = int(rng.integers(spec.num_classes)) if y is None else y
                images.append(render_example(spec, cls, style, rng))
                labels.append(-1 if y is None else y)
                doms.append(d)
    return Split(np.stack(images), np.array(labels, dtype=np.int64), np.array(doms, dtype=np.int64))


def generate_dataset(spec: DomainShiftSpec, source_domains, target_domains, seed: int) -> DatasetBundle:
    src, tgt = tuple(source_domains), tuple(target_domains)
    if not src or not tgt:
        raise SpecError("need at least one source and one target domain")
    if set(src) & set(tgt):
        raise SpecError(f"source domains {src} and target domains {tgt} overlap")
    tset = set(tgt)
    return DatasetBundle(
        train=_make_split(spec, src, spec.n_train, seed, "train", tset),
        target_unlabeled=_make_split(spec, tgt, spec.n_unlabeled, seed, "unlabeled", tset, labeled=False),
        id_test=_make_split(spec, src, spec.n_id_test, seed, "id_test", tset),
        ood_test=_make_split(spec, tgt, spec.n_ood_test, seed, "ood_test", tset),
        source_domains=src,
        target_domains=tgt,
        spec=spec,
    )


def band_energy(images: np.ndarray, center: tuple[float, float], radius: float = 1.5) -> float:
    """Mean squared amplitude within ``radius`` bins of +/- ``center``."""
    n = images.shape[-1]
    fu = _signed_freqs(images.shape[-2])[:, None]
    fv = _signed_freqs(n)[None, :]
    cu, cv = center
    band = ((fu - cu) ** 2 + (fv - cv) ** 2 <= radius**2) | ((fu + cu) ** 2 + (fv + cv) ** 2 <= radius**2)
    s = fft2(images)
    power = s.re**2 + s.im**2
    return float(power[..., band].mean())


def sample_partners(bundle: DatasetBundle, idx: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Partner images for train examples ``idx``.

    ``da``: uniform over the unlabeled target pool. ``dg``: uniform over train
    examples from a different domain than the source example.
    """
    idx = np.asarray(idx)
    if mode == "da":
        pool = bundle.target_unlabeled
        if len(pool) == 0:
            raise SamplingError("mode 'da' needs unlabeled target images")
        return pool.images[rng.integers(len(pool), size=len(idx))]
    if mode == "dg":
        doms = bundle.train.domains
        if len(np.unique(doms)) < 2:
            raise SamplingError("mode 'dg' needs at least two source domains")
        out = np.empty((len(idx),) + bundle.train.images.shape[1:])
        for k, i in enumerate(idx):
            pool = np.flatnonzero(doms != doms[i])
            out[k] = bundle.train.images[pool[rng.integers(len(pool))]]
        return out
    raise SamplingError(f"unknown pairing mode {mode!r}")


def sample_pair(bundle: DatasetBundle, mode: str, rng: np.random.Generator) -> tuple[LabeledExample, np.ndarray]:
    if len(bundle.train) == 0:
        raise SamplingError("empty train split")
    if mode == "da" and len(bundle.target_unlabeled) == 0:
        raise SamplingError("mode 'da' needs unlabeled target images")
    if mode == "dg" and len(np.unique(bundle.train.domains)) < 2:
        raise SamplingError("mode 'dg' needs at least two source domains")
    i = int(rng.integers(len(bundle.train)))
    x2 = sample_partners(bundle, np.array([i]), mode, rng)[0]
    return bundle.train[i], x2


# --- PPM / PGM -------------------------------------------------------------

def write_image(path, image: np.ndarray) -> None:
    """Binary PPM (3 channels) or PGM (1 channel), maxval 255."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    if c not in (1, 3):
        raise ValueError(f"write_image: need 1 or 3 channels, got {c}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("write_image: pixels must lie in [0, 1]")
    q = np.floor(x * 255.0 + 0.5).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    payload = q.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + payload)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated header", pos)
        tokens.append((m.group(1), m.start(1)))
        pos = m.end(1)
    magic, off = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", off)
    vals = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise ImageFormatError(f"expected integer, got {tok!r}", off)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", tokens[3][1])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", pos)
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(data) - pos < need:
        raise ImageFormatError(f"payload has {len(data) - pos} bytes, expected {need}", pos)
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


# --- manifest --------------------------------------------------------------

MANIFEST_HEADER = "# path\tsplit\tlabel\tdomain"


def write_manifest(path, records) -> None:
    """``records``: iterable of (path, split, label or None, domain)."""
    lines = [MANIFEST_HEADER]
    for p, split, label, domain in records:
        lines.append(f"{p}\t{split}\t{'-' if label is None or label < 0 else int(label)}\t{int(domain)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, str, int | None, int]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(parts)}")
        p, split, label, domain = parts
        out.append((p, split, None if label == "-" else int(label), int(domain)))
    return out


def export_bundle(bundle: DatasetBundle, out_dir) -> Path:
    """Write every image as PPM/PGM plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    records = []
    for name in ("train", "target_unlabeled", "id_test", "ood_test"):
        split: Split = getattr(bundle, name)
        sub = out / "images" / name
        sub.mkdir(parents=True, exist_ok=True)
        ext = "ppm" if split.images.shape[1] == 3 else "pgm"
        for i in range(len(split)):
            rel = os.path.join("images", name, f"{i:05d}.{ext}")
            write_image(out / rel, split.images[i])
            records.append((rel, name, int(split.labels[i]), int(split.domains[i])))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest
