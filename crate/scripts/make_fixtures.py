"""Regenerate the bundled fixtures.

natural/<name>/image.png   512x512 RGB
natural/<name>/masks/      mask stack (manifest.json + level_<t>/m_<j>.png)
three_shapes/image.png     64x64 synthetic scene
three_shapes/masks/

Run from the repository root: python3 scripts/make_fixtures.py
"""

import json
import os

import numpy as np
from PIL import Image
from skimage import data, segmentation, transform
from skimage.color import gray2rgb

OUT = "fixtures"
SIZE = 512

IMAGES = [
    ("astronaut", data.astronaut, "public domain (NASA)"),
    ("camera", data.camera, "CC0 (Stefan van der Walt)"),
    ("coffee", data.coffee, "CC0 (Rachel Michetti)"),
    ("chelsea", data.chelsea, "CC0 (Stefan van der Walt)"),
    ("rocket", data.rocket, "public domain (SpaceX)"),
    ("hubble_deep_field", data.hubble_deep_field, "public domain (NASA/ESA)"),
    ("coins", data.coins, "no known copyright restrictions (Walters Art Museum)"),
    ("immunohistochemistry", data.immunohistochemistry, "no known copyright restrictions"),
    ("retina", data.retina, "CC0 (Häggström, Wikimedia Commons)"),
    ("cell", data.cell, "CC0 (Ollie Gross)"),
]


def save_stack(root, levels):
    """levels: list of (t, [bool arrays])"""
    os.makedirs(root, exist_ok=True)
    h, w = levels[0][1][0].shape
    manifest = {"width": w, "height": h, "levels": []}
    for t, masks in levels:
        sub = f"level_{t}"
        os.makedirs(os.path.join(root, sub), exist_ok=True)
        names = []
        for j, m in enumerate(masks):
            name = f"{sub}/m_{j}.png"
            Image.fromarray((m * 255).astype(np.uint8), mode="L").save(
                os.path.join(root, name), optimize=True
            )
            names.append(name)
        manifest["levels"].append({"t": t, "masks": names})
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def segments(labels, min_frac):
    out = []
    n = labels.size
    for lab in np.unique(labels):
        m = labels == lab
        if m.sum() >= min_frac * n:
            out.append(m)
    out.sort(key=lambda m: -int(m.sum()))
    return out


def natural(name, loader, license_note):
    img = loader()
    if img.ndim == 2:
        img = gray2rgb(img)
    img = img[..., :3]
    img = transform.resize(img, (SIZE, SIZE), anti_aliasing=True)
    img8 = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    root = os.path.join(OUT, "natural", name)
    os.makedirs(root, exist_ok=True)
    Image.fromarray(img8, mode="RGB").save(os.path.join(root, "image.png"), optimize=True)

    f = img8.astype(np.float64) / 255.0
    coarse_all = segments(segmentation.felzenszwalb(f, scale=300, sigma=0.8, min_size=400), 0.002)
    union = np.zeros((SIZE, SIZE), bool)
    coarse = []
    for m in coarse_all:
        if union.mean() >= 0.7 or len(coarse) == 24:
            break
        coarse.append(m)
        union |= m
    levels = [(1, coarse)]
    for t, (scale, min_size) in enumerate([(120, 150), (40, 60)], start=2):
        cand = segments(segmentation.felzenszwalb(f, scale=scale, sigma=0.6, min_size=min_size), 0.0002)
        keep = []
        for m in cand:
            # Candidates mostly hidden by earlier levels carry no information.
            if (m & union).sum() <= 0.95 * m.sum():
                keep.append(m)
        keep = keep[:60]
        for m in keep:
            if (m & union).sum() <= 0.9 * m.sum():
                union |= m
        levels.append((t, keep))
    coarse, fine = levels[0][1], levels[1][1]
    save_stack(os.path.join(root, "masks"), levels)
    return {
        "name": name,
        "license": license_note,
        "source": "scikit-image sample data",
        "masks": [len(l[1]) for l in levels],
        "coverage": round(float(union.mean()), 4),
    }


def three_shapes():
    n = 64
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    square = (xx > 8) & (xx < 40) & (yy > 10) & (yy < 44)
    circle = (xx - 52) ** 2 + (yy - 20) ** 2 < 10.5 ** 2
    # Triangle hanging off the square's lower right corner.
    tri = (yy > 30) & (yy < 58) & (xx > 26 + (58 - yy) * 0.0) & (xx - 26 < (yy - 30) * 1.1)
    img = np.ones((n, n, 3))
    img[square] = (0.20, 0.40, 0.80)
    img[circle] = (0.90, 0.75, 0.10)
    img[tri] = (0.80, 0.20, 0.25)
    root = os.path.join(OUT, "three_shapes")
    os.makedirs(root, exist_ok=True)
    img8 = np.round(img * 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(os.path.join(root, "image.png"))
    save_stack(os.path.join(root, "masks"), [(1, [square, circle]), (2, [tri])])


def main():
    three_shapes()
    entries = [natural(*spec) for spec in IMAGES]
    with open(os.path.join(OUT, "natural", "manifest.json"), "w") as f:
        json.dump({"size": SIZE, "images": entries}, f, indent=1)
    for e in entries:
        print(e["name"], e["masks"], e["coverage"])


if __name__ == "__main__":
    main()
