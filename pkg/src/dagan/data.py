"""Bi-temporal samples: tiling, splitting, augmentation, synthetic data and disk I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class BiTemporalSample:
    """Co-registered pair with its change mask.

    Images are float32 ``[3, H, W]`` in ``[0, 1]``; ``mask`` is uint8 ``[H, W]``
    with 1 for change. ``source_id`` names the full-size image a tile was cut
    from and defaults to ``id``. ``pseudo`` marks model-labelled pairs added
    by self-training.
    """

    image_t1: np.ndarray
    image_t2: np.ndarray
    mask: np.ndarray
    id: str
    source_id: str | None = None
    pseudo: bool = False

    def __post_init__(self):
        if self.source_id is None:
            self.source_id = self.id

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    def validate(self) -> "BiTemporalSample":
        h, w = self.mask.shape
        for name in ("image_t1", "image_t2"):
            img = getattr(self, name)
            if img.ndim != 3 or img.shape[0] != 3 or img.shape[1:] != (h, w):
                raise ValueError(f"{self.id}: {name} has shape {img.shape}, mask is {(h, w)}")
            if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
                raise ValueError(f"{self.id}: {name} values must be finite and within [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask must contain only 0 and 1")
        return self


@dataclass
class DatasetManifest:
    samples: list
    split: str
    tile_size: int | None = None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def source_ids(self) -> set:
        return {s.source_id for s in self.samples}


# ---------------------------------------------------------------- tiling

def tile_pairs(source_pairs, tile: int) -> list[BiTemporalSample]:
    """Cut every pair into ``tile x tile`` patches, row-major, ids ``"<src>_<r>_<c>"``."""
    tiles = []
    for pair in source_pairs:
        h, w = pair.mask.shape
        for name in ("image_t1", "image_t2"):
            if getattr(pair, name).shape[1:] != (h, w):
                raise ValueError(f"{pair.id}: {name} is {getattr(pair, name).shape[1:]}, mask is {(h, w)}")
        if h % tile or w % tile:
            raise ValueError(f"{pair.id}: tile size {tile} does not divide source size {h}x{w}")
        for r in range(h // tile):
            for c in range(w // tile):
                rs = slice(r * tile, (r + 1) * tile)
                cs = slice(c * tile, (c + 1) * tile)
                tiles.append(BiTemporalSample(
                    pair.image_t1[:, rs, cs].copy(),
                    pair.image_t2[:, rs, cs].copy(),
                    pair.mask[rs, cs].copy(),
                    id=f"{pair.id}_{r}_{c}",
                    source_id=pair.source_id,
                ))
    return tiles


def parse_tile_id(tile_id: str) -> tuple[str, int, int]:
    src, r, c = tile_id.rsplit("_", 2)
    return src, int(r), int(c)


def stitch(tiles, key: str = "mask") -> dict:
    """Reassemble per-source arrays from tiles; returns ``{source_id: array}``.

    ``key`` is an attribute of the tiles (``"mask"``, ``"image_t1"``, ...) or
    the tiles may be ``(tile_id, array)`` pairs.
    """
    grid = {}
    for t in tiles:
        tile_id, arr = (t if isinstance(t, tuple) else (t.id, getattr(t, key)))
        src, r, c = parse_tile_id(tile_id)
        grid.setdefault(src, {})[(r, c)] = arr
    out = {}
    for src, cells in grid.items():
        nr = max(r for r, _ in cells) + 1
        nc = max(c for _, c in cells) + 1
        if len(cells) != nr * nc:
            raise ValueError(f"{src}: missing tiles for a {nr}x{nc} grid")
        rows = [np.concatenate([cells[(r, c)] for c in range(nc)], axis=-1) for r in range(nr)]
        out[src] = np.concatenate(rows, axis=-2)
    return out


# ---------------------------------------------------------------- splitting

def _allocate(n: int, ratios) -> list[int]:
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or (r < 0).any() or r.sum() <= 0:
        raise ValueError(f"ratios must be three nonnegative numbers with a positive sum, got {ratios}")
    r = r / r.sum()
    nonzero = int((r > 0).sum())
    if n < nonzero:
        raise ValueError(f"{n} source images cannot fill {nonzero} nonempty splits")
    exact = n * r
    counts = np.floor(exact + 1e-9).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    for i in np.flatnonzero((r > 0) & (counts == 0)):
        counts[int(np.argmax(counts))] -= 1
        counts[i] += 1
    return counts.tolist()


def split_dataset(pairs, ratios=(0.7, 0.1, 0.2), seed: int = 0, tile_size=None):
    """Partition ``pairs`` into train/val/test manifests by source image.

    Tiles sharing a ``source_id`` always land in the same split. The result
    depends only on ``seed`` and the set of source ids.
    """
    sources = sorted({p.source_id for p in pairs})
    counts = _allocate(len(sources), ratios)
    order = np.random.default_rng(seed).permutation(len(sources))
    assignment = {}
    start = 0
    for split, n in zip(SPLITS, counts):
        for idx in order[start:start + n]:
            assignment[sources[idx]] = split
        start += n
    return tuple(
        DatasetManifest([p for p in pairs if assignment[p.source_id] == split], split, tile_size)
        for split in SPLITS
    )


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    crop_scale: tuple = (0.8, 1.0)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for p in (self.hflip, self.vflip):
            if not 0 <= p <= 1:
                raise ValueError(f"flip probability {p} outside [0, 1]")


@dataclass(frozen=True)
class Transform:
    """One geometric transform: crop box ``(top, left, height, width)`` resized
    back to the original size, then optional flips."""

    crop: tuple
    hflip: bool = False
    vflip: bool = False


def sample_transform(size, config: AugmentConfig, rng: np.random.Generator) -> Transform:
    h, w = size
    scale = rng.uniform(*config.crop_scale)
    ch = min(h, max(1, int(round(h * scale))))
    cw = min(w, max(1, int(round(w * scale))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return Transform((top, left, ch, cw), bool(rng.random() < config.hflip),
                     bool(rng.random() < config.vflip))


def _resize(arr: np.ndarray, size, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    squeeze = t.dim() == 2
    t = t[None, None] if squeeze else t[None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=size, mode=mode, **kwargs)[0]
    return (out[0] if squeeze else out).numpy()


def apply_transform(sample: BiTemporalSample, t: Transform) -> BiTemporalSample:
    h, w = sample.mask.shape
    top, left, ch, cw = t.crop
    if not (0 <= top and 0 <= left and top + ch <= h and left + cw <= w):
        raise ValueError(f"crop {t.crop} exceeds sample size {h}x{w}")
    rs, cs = slice(top, top + ch), slice(left, left + cw)
    a, b, m = sample.image_t1[:, rs, cs], sample.image_t2[:, rs, cs], sample.mask[rs, cs]
    if (ch, cw) != (h, w):
        a = np.clip(_resize(a, (h, w), "bilinear"), 0, 1)
        b = np.clip(_resize(b, (h, w), "bilinear"), 0, 1)
        m = _resize(m, (h, w), "nearest-exact").astype(np.uint8)
    if t.hflip:
        a, b, m = a[..., ::-1], b[..., ::-1], m[..., ::-1]
    if t.vflip:
        a, b, m = a[..., ::-1, :], b[..., ::-1, :], m[..., ::-1, :]
    return replace(sample, image_t1=np.ascontiguousarray(a, dtype=np.float32),
                   image_t2=np.ascontiguousarray(b, dtype=np.float32),
                   mask=np.ascontiguousarray(m, dtype=np.uint8))


def augment(sample: BiTemporalSample, config: AugmentConfig, rng: np.random.Generator,
            return_transform: bool = False):
    """Apply one random crop-resize/flip transform identically to both images and the mask."""
    t = sample_transform(sample.mask.shape, config, rng)
    out = apply_transform(sample, t)
    return (out, t) if return_transform else out


# ---------------------------------------------------------------- synthetic data

def _texture(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size), dtype=np.float64)
    base = rng.uniform(0.25, 0.55, size=3)
    for ch in range(3):
        field_ = np.zeros((size, size))
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img[ch] = base[ch] + 0.05 * field_ + rng.normal(0, 0.03, (size, size))
    return img


def _random_rect(rng, size, grid):
    cells = size // grid
    lo = max(1, cells // 8)
    hi = max(lo + 1, cells // 3)
    h, w = rng.integers(lo, hi + 1, size=2)
    top = rng.integers(0, cells - h + 1)
    left = rng.integers(0, cells - w + 1)
    return slice(top * grid, (top + h) * grid), slice(left * grid, (left + w) * grid)


def make_synthetic_dataset(n: int, size: int = 64, seed: int = 0, changes=(1, 3),
                           static=(0, 2), grid: int = 4, prefix: str = "synth"):
    """Generate ``n`` textured scenes where T2 differs from T1 by added or removed rectangles.

    ``changes`` and ``static`` are inclusive ranges for the number of changed
    and unchanged rectangles. Rectangles snap to a ``grid``-pixel lattice.
    The mask is exactly the union of the changed rectangles.
    """
    if size < 16 or n < 1:
        raise ValueError(f"need size >= 16 and n >= 1, got size={size}, n={n}")
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        t1 = _texture(rng, size)
        for _ in range(rng.integers(static[0], static[1] + 1)):
            rs, cs = _random_rect(rng, size, grid)
            t1[:, rs, cs] = rng.uniform(0.6, 1.0, size=3)[:, None, None]
        t2 = t1.copy()
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(rng.integers(changes[0], changes[1] + 1)):
            rs, cs = _random_rect(rng, size, grid)
            color = rng.uniform(0.6, 1.0, size=3)[:, None, None]
            if rng.random() < 0.5:
                t2[:, rs, cs] = color          # built
            else:
                t1[:, rs, cs] = color          # demolished
                t2[:, rs, cs] = _texture(rng, size)[:, rs, cs]
            mask[rs, cs] = 1
        samples.append(BiTemporalSample(
            np.clip(t1, 0, 1).astype(np.float32),
            np.clip(t2, 0, 1).astype(np.float32),
            mask, id=f"{prefix}{k:04d}"))
    return samples


# ---------------------------------------------------------------- batching

def collate(samples, device=None, dtype=torch.float32):
    """Stack samples into ``(t1 [B,3,H,W], t2 [B,3,H,W], mask [B,1,H,W])`` tensors."""
    t1 = torch.from_numpy(np.stack([s.image_t1 for s in samples])).to(device, dtype)
    t2 = torch.from_numpy(np.stack([s.image_t2 for s in samples])).to(device, dtype)
    mask = torch.from_numpy(np.stack([s.mask for s in samples])[:, None]).to(device, dtype)
    return t1, t2, mask


# ---------------------------------------------------------------- disk layout

def _read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)


def _write_png(path, arr: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(arr).save(path)


def image_to_array(arr: np.ndarray) -> np.ndarray:
    """uint8 ``[H, W, 3]`` (or grey) to float32 ``[3, H, W]`` in ``[0, 1]``."""
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return (arr[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def mask_from_png(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr >= 128).astype(np.uint8)


def load_pair(path_t1, path_t2, path_label=None, sample_id=None) -> BiTemporalSample:
    a = image_to_array(_read_png(path_t1))
    b = image_to_array(_read_png(path_t2))
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {path_t1} {a.shape[1:]} vs {path_t2} {b.shape[1:]}")
    if path_label is not None:
        mask = mask_from_png(_read_png(path_label))
    else:
        mask = np.zeros(a.shape[1:], dtype=np.uint8)
    if mask.shape != a.shape[1:]:
        raise ValueError(f"label {path_label} is {mask.shape}, images are {a.shape[1:]}")
    return BiTemporalSample(a, b, mask, id=sample_id or Path(path_t1).stem)


def load_dataset(root, ids=None) -> list[BiTemporalSample]:
    """Read ``<root>/{A,B,label}/<id>.png``."""
    root = Path(root)
    for sub in ("A", "B", "label"):
        if not (root / sub).is_dir():
            raise FileNotFoundError(f"missing directory {root / sub}")
    if ids is None:
        ids = sorted(p.stem for p in (root / "A").glob("*.png"))
    return [load_pair(root / "A" / f"{i}.png", root / "B" / f"{i}.png",
                      root / "label" / f"{i}.png", sample_id=i) for i in ids]


def save_dataset(samples, root) -> None:
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        for sub, img in (("A", s.image_t1), ("B", s.image_t2)):
            _write_png(root / sub / f"{s.id}.png",
                       np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8))
        _write_png(root / "label" / f"{s.id}.png", (s.mask * 255).astype(np.uint8))


def write_manifest(path, manifests, root=None) -> None:
    """One JSON record per line: id, source, split and the three image paths."""
    root = Path(root) if root is not None else None
    with open(path, "w") as fh:
        for m in manifests:
            for s in m.samples:
                rec = {"id": s.id, "source": s.source_id, "split": m.split}
                if root is not None:
                    rec.update({k: str(root / sub / f"{s.id}.png")
                                for k, sub in (("t1", "A"), ("t2", "B"), ("label", "label"))})
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path, root=None) -> dict:
    """Load samples listed in a manifest file, grouped as ``{split: DatasetManifest}``."""
    groups: dict = {split: [] for split in SPLITS}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if root is not None:
                paths = [Path(root) / sub / f"{rec['id']}.png" for sub in ("A", "B", "label")]
            else:
                paths = [rec["t1"], rec["t2"], rec["label"]]
            s = load_pair(*paths, sample_id=rec["id"])
            s.source_id = rec.get("source", rec["id"])
            groups.setdefault(rec["split"], []).append(s)
    return {split: DatasetManifest(samples, split) for split, samples in groups.items()}
