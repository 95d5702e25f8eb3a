"""Bi-temporal samples: synthetic generation, on-disk loading and tiling.

On-disk layout (shared by real and synthetic data)::

    root/<split>/A/<name>.png      image at time 1 (8-bit RGB)
    root/<split>/B/<name>.png      image at time 2
    root/<split>/label/<name>.png  change mask (8-bit, >= 128 means changed)
"""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

LABEL_THRESHOLD = 128
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


@dataclass
class SamplePair:
    image_a: np.ndarray   # H x W x 3 uint8
    image_b: np.ndarray   # H x W x 3 uint8
    gt: np.ndarray        # H x W uint8 in {0, 1}
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.gt.shape
        if self.image_a.shape[:2] != (h, w) or self.image_b.shape[:2] != (h, w):
            raise ValueError(f"sample {self.id}: image and mask sizes differ "
                             f"({self.image_a.shape[:2]}, {self.image_b.shape[:2]}, {self.gt.shape})")
        if not np.isin(self.gt, (0, 1)).all():
            raise ValueError(f"sample {self.id}: gt must be binary")


@dataclass
class SynthConfig:
    size: int = 256
    n_shapes: Tuple[int, int] = (2, 6)
    shape_kinds: Tuple[str, ...] = ("rect", "L")
    side_range: Tuple[float, float] = (0.08, 0.25)   # building side as a fraction of size
    p_appear: float = 0.35
    p_disappear: float = 0.15
    p_persist: float = 0.5
    p_color_change: float = 0.5   # of persistent buildings
    noise_amplitude: float = 12.0
    illumination_shift: float = 0.2
    p_shadow: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.size % 8:
            raise ValueError(f"size must be divisible by 8, got {self.size}")
        if min(self.p_appear, self.p_disappear, self.p_persist) < 0:
            raise ValueError("shape probabilities must be non-negative")
        if self.p_appear + self.p_disappear + self.p_persist > 1 + 1e-12:
            raise ValueError("appear/disappear/persist probabilities must sum to <= 1")
        if self.n_shapes[0] < 0 or self.n_shapes[1] < self.n_shapes[0]:
            raise ValueError(f"invalid n_shapes range {self.n_shapes}")
        unknown = set(self.shape_kinds) - {"rect", "L"}
        if unknown or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")


@dataclass
class Footprint:
    """Axis-aligned rectangle, optionally with one corner cut away (an L shape)."""
    x0: int
    y0: int
    x1: int
    y1: int
    notch: Optional[Tuple[int, int, int, int]] = None   # removed corner rectangle
    status: str = "persist"                              # appear | disappear | persist
    color_change: bool = False

    def polygon(self):
        """Vertex list in pixel-edge coordinates (x right, y down)."""
        x0, y0, x1, y1 = self.x0, self.y0, self.x1, self.y1
        if self.notch is None:
            return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        nx0, ny0, nx1, ny1 = self.notch
        # notch always shares the bottom-right corner of the rectangle
        return [(x0, y0), (x1, y0), (x1, ny0), (nx0, ny0), (nx0, y1), (x0, y1)]

    def raster(self, h, w):
        m = np.zeros((h, w), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        if self.notch is not None:
            nx0, ny0, nx1, ny1 = self.notch
            m[ny0:ny1, nx0:nx1] = False
        return m

    @property
    def in_a(self):
        return self.status in ("disappear", "persist")

    @property
    def in_b(self):
        return self.status in ("appear", "persist")


def _place_footprints(cfg: SynthConfig, rng) -> list:
    s = cfg.size
    lo = max(3, int(round(cfg.side_range[0] * s)))
    hi = max(lo + 1, int(round(cfg.side_range[1] * s)))
    n = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    occupied = np.zeros((s, s), dtype=bool)
    shapes = []
    margin = 2
    for _ in range(n):
        for _attempt in range(30):
            bw, bh = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(1, s - bw))
            y0 = int(rng.integers(1, s - bh))
            x1, y1 = x0 + bw, y0 + bh
            if occupied[max(0, y0 - margin):y1 + margin, max(0, x0 - margin):x1 + margin].any():
                continue
            kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
            notch = None
            if kind == "L" and bw >= 4 and bh >= 4:
                cw = int(rng.integers(max(1, bw // 3), max(2, 2 * bw // 3)))
                ch = int(rng.integers(max(1, bh // 3), max(2, 2 * bh // 3)))
                notch = (x1 - cw, y1 - ch, x1, y1)
            u = rng.random()
            if u < cfg.p_appear:
                status = "appear"
            elif u < cfg.p_appear + cfg.p_disappear:
                status = "disappear"
            elif u < cfg.p_appear + cfg.p_disappear + cfg.p_persist:
                status = "persist"
            else:
                break   # the shape exists in neither epoch
            fp = Footprint(x0, y0, x1, y1, notch, status)
            fp.color_change = status == "persist" and bool(rng.random() < cfg.p_color_change)
            occupied[y0:y1, x0:x1] = True
            shapes.append(fp)
            break
    return shapes


def _smooth_field(rng, s, grid=3):
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((s, s), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32)


def _background(cfg: SynthConfig, rng, base):
    s = cfg.size
    noise = rng.normal(0.0, cfg.noise_amplitude, size=(s, s, 3)).astype(np.float32)
    # mild spatial correlation so the texture is not pure white noise
    noise = 0.5 * noise + 0.25 * np.roll(noise, 1, axis=0) + 0.25 * np.roll(noise, 1, axis=1)
    illum = 1.0 + cfg.illumination_shift * _smooth_field(rng, s)
    tint = rng.uniform(-15.0, 15.0, size=3).astype(np.float32)
    return (base[None, None, :] + tint + noise) * illum[..., None], illum


def _roof_color(rng):
    return rng.uniform(60.0, 245.0, size=3).astype(np.float32)


def _shadow_mask(fp: Footprint, s, rng):
    dx, dy = (int(v) for v in rng.integers(2, 5, size=2))
    m = np.zeros((s, s), dtype=bool)
    m[min(s, fp.y0 + dy):min(s, fp.y1 + dy), min(s, fp.x0 + dx):min(s, fp.x1 + dx)] = True
    return m


def _render_epoch(cfg, rng, base, shapes, colors, present, all_fp):
    s = cfg.size
    img, illum = _background(cfg, rng, base)
    shadow = np.zeros((s, s), dtype=bool)
    for fp, on in zip(shapes, present):
        if on and rng.random() < cfg.p_shadow:
            shadow |= _shadow_mask(fp, s, rng)
    shadow &= ~all_fp
    img[shadow] *= 0.45
    for fp, on, color in zip(shapes, present, colors):
        if not on:
            continue
        m = fp.raster(s, s)
        roof = color[None, :] * illum[m][:, None] + rng.normal(0.0, 4.0, size=(int(m.sum()), 3))
        img[m] = roof
    return np.clip(np.round(img), 0, 255).astype(np.uint8), shadow


def generate_one(cfg: SynthConfig, index: int) -> SamplePair:
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.size
    shapes = _place_footprints(cfg, rng)
    base = rng.uniform(70.0, 150.0, size=3).astype(np.float32)
    colors_a = [_roof_color(rng) for _ in shapes]
    colors_b = [_roof_color(rng) if fp.color_change else c for fp, c in zip(shapes, colors_a)]

    all_fp = np.zeros((s, s), dtype=bool)
    mask_a = np.zeros((s, s), dtype=bool)
    mask_b = np.zeros((s, s), dtype=bool)
    color_change = np.zeros((s, s), dtype=bool)
    for fp in shapes:
        m = fp.raster(s, s)
        all_fp |= m
        mask_a |= m & fp.in_a
        mask_b |= m & fp.in_b
        if fp.color_change:
            color_change |= m

    img_a, shadow_a = _render_epoch(cfg, rng, base, shapes, colors_a, [fp.in_a for fp in shapes], all_fp)
    img_b, shadow_b = _render_epoch(cfg, rng, base, shapes, colors_b, [fp.in_b for fp in shapes], all_fp)
    gt = (mask_a ^ mask_b).astype(np.uint8)
    meta = {
        "footprints": shapes,
        "color_change": color_change,
        "shadow": shadow_a | shadow_b,
    }
    return SamplePair(img_a, img_b, gt, f"synth-s{cfg.seed}-{index:05d}", meta)


def generate(cfg: SynthConfig, n: int, start: int = 0) -> list:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [generate_one(cfg, start + i) for i in range(n)]


def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_label(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= LABEL_THRESHOLD).astype(np.uint8)


def _list_images(d: Path):
    if not d.is_dir():
        raise FileNotFoundError(f"missing directory {d}")
    return sorted(p.name for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


class PairDataset(Sequence):
    """Lazily loaded triples from ``root/<split>/{A,B,label}`` in filename order."""

    def __init__(self, root, split="train", names=None):
        self.dir = Path(root) / split if split else Path(root)
        a_names = _list_images(self.dir / "A")
        b_names = set(_list_images(self.dir / "B"))
        l_names = set(_list_images(self.dir / "label"))
        for name in a_names:
            if name not in b_names:
                raise FileNotFoundError(f"{self.dir / 'A' / name} has no counterpart in B/")
            if name not in l_names:
                raise FileNotFoundError(f"{self.dir / 'A' / name} has no counterpart in label/")
        orphans = sorted((b_names | l_names) - set(a_names))
        if orphans:
            raise FileNotFoundError(f"{orphans[0]} has no counterpart in A/")
        if names is not None:
            missing = [n for n in names if n not in set(a_names)]
            if missing:
                raise FileNotFoundError(f"manifest entry {missing[0]} not found in {self.dir / 'A'}")
            a_names = list(names)
        self.names = a_names

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        name = self.names[i]
        a = _read_rgb(self.dir / "A" / name)
        b = _read_rgb(self.dir / "B" / name)
        gt = _read_label(self.dir / "label" / name)
        if a.shape[:2] != b.shape[:2] or a.shape[:2] != gt.shape:
            raise ValueError(f"{name}: size mismatch between A {a.shape[:2]}, B {b.shape[:2]}, "
                             f"label {gt.shape}")
        return SamplePair(a, b, gt, os.path.splitext(name)[0])


def read_manifest(path):
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def load_dataset(root, split="train", manifest=None) -> PairDataset:
    names = read_manifest(manifest) if manifest else None
    return PairDataset(root, split, names)


def write_dataset(samples, root, split="train"):
    """Materialize samples in the standard layout; returns the split directory."""
    d = Path(root) / split
    for sub in ("A", "B", "label"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image_a).save(d / "A" / f"{s.id}.png")
        Image.fromarray(s.image_b).save(d / "B" / f"{s.id}.png")
        Image.fromarray((s.gt * 255).astype(np.uint8)).save(d / "label" / f"{s.id}.png")
    return d


def tile_origins(h, w, tile, overlap=0):
    if tile > min(h, w):
        raise ValueError(f"tile {tile} larger than image {h}x{w}")
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must be in [0, tile), got {overlap}")
    stride = tile - overlap
    return [(r, c) for r in range(0, h - tile + 1, stride) for c in range(0, w - tile + 1, stride)]


def crop_tiles(samples, tile: int, overlap: int = 0) -> list:
    """Row-major tiles of every sample; trailing partial tiles are dropped."""
    if isinstance(samples, SamplePair):
        samples = [samples]
    stride = tile - overlap
    out = []
    for s in samples:
        h, w = s.gt.shape
        for r, c in tile_origins(h, w, tile, overlap):
            win = (slice(r, r + tile), slice(c, c + tile))
            out.append(SamplePair(s.image_a[win].copy(), s.image_b[win].copy(), s.gt[win].copy(),
                                  f"{s.id}_r{r // stride}_c{c // stride}"))
    return out


def untile(tiles, grid_h, grid_w):
    """Reassemble non-overlapping row-major tiles (arrays) into one array."""
    rows = [np.concatenate(tiles[i * grid_w:(i + 1) * grid_w], axis=1) for i in range(grid_h)]
    return np.concatenate(rows, axis=0)
