"""
Synthetic change-detection pairs
================================

The real benchmark is 637 pairs of 1024x1024 aerial images. Nothing here
needs it: ``make_synthetic_dataset`` draws textured ground, a few static
rectangles that appear in both dates, and one to three rectangles that are
built (only in T2) or demolished (only in T1). The label marks exactly the
pixels whose content changed.

Run from the repository root:  python notebooks/01_synthetic_data.py
"""

# %%
from pathlib import Path

import numpy as np
from PIL import Image

from dagan import make_synthetic_dataset, split_dataset, tile_pairs
from dagan.data import save_dataset, stitch

out = Path("runs/notebooks/synthetic")
out.mkdir(parents=True, exist_ok=True)

samples = make_synthetic_dataset(8, size=128, seed=0)
s = samples[0]
print(s.id, s.image_t1.shape, s.image_t2.shape, s.mask.shape, "changed fraction", s.mask.mean())

# %% [markdown]
# Side by side: T1 | T2 | label. Rectangle corners sit on a 4-pixel grid, so a
# change map predicted at quarter resolution can reproduce the label exactly.

# %%
def to_rgb(chw):
    return (np.clip(chw.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)

strip = np.concatenate([to_rgb(s.image_t1), to_rgb(s.image_t2),
                        np.repeat(s.mask[..., None] * 255, 3, axis=2).astype(np.uint8)], axis=1)
Image.fromarray(strip).save(out / "pair0.png")

# the label is exactly where the two dates differ
differs = np.any(s.image_t1 != s.image_t2, axis=0)
print("pixels that differ outside the label:", int(differs[s.mask == 0].sum()))

# %% [markdown]
# Tiling and splitting. Large scenes are cut into fixed tiles; the split is
# done per source scene so tiles of one scene never land in two splits.

# %%
tiles = tile_pairs(samples, 64)
print(len(samples), "scenes ->", len(tiles), "tiles; first ids:", [t.id for t in tiles[:4]])

back = stitch(tiles, "mask")
assert all(np.array_equal(back[x.id], x.mask) for x in samples)

train, val, test = split_dataset(tiles, (0.7, 0.1, 0.2), seed=0, tile_size=64)
for m in (train, val, test):
    print(f"{m.split:5s} {len(m):3d} tiles from scenes {sorted(m.source_ids)}")

# %%
save_dataset(samples, out / "dataset")   # <root>/{A,B,label}/<id>.png, readable by the CLI
print("wrote", out / "dataset")
