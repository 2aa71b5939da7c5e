"""Synthetic desk-scale corpus: elliptical "lungs" with square "lesions".

Every image carries two bright ellipses on a noisy background; the union
of the ellipses is the segmentation mask. Positive-class images
additionally contain one bright square inside a lung, whose bounding box
is recorded so locality checks can compare heat mass inside vs outside.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from recovnet.imaging import save_pixels
from recovnet.seeding import rng_from


@dataclass
class Corpus:
    root: Path
    seg_manifest: Path
    clf_manifest: Path
    lesions: dict[str, tuple[int, int, int, int]]  # image filename -> (r0, c0, r1, c1)
    n: int
    size: int


def _ellipse(size, cy, cx, ry, rx):
    rr, cc = np.mgrid[0:size, 0:size]
    return ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0


def make_corpus(root, n=200, size=64, seed=0, lesion=8) -> Corpus:
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    seg_rows = []
    clf_rows = []
    lesions: dict[str, tuple[int, int, int, int]] = {}
    for i in range(n):
        rng = rng_from(seed, i)
        covid = i % 2 == 1
        cy = size / 2 + rng.uniform(-2, 2)
        ry = size * 0.30 + rng.uniform(-2, 2)
        rx = size * 0.16 + rng.uniform(-1.5, 1.5)
        cx_left = size * 0.28 + rng.uniform(-2, 2)
        cx_right = size * 0.72 + rng.uniform(-2, 2)
        mask = _ellipse(size, cy, cx_left, ry, rx) | _ellipse(size, cy, cx_right, ry, rx)

        img = 0.08 + 0.04 * rng.random((size, size))
        img[mask] += 0.38 + rng.uniform(-0.03, 0.03)

        name = f"img{i:04d}.png"
        if covid:
            lung_cx = cx_left if rng.random() < 0.5 else cx_right
            lr = int(np.clip(cy + rng.uniform(-6, 6), lesion / 2 + 1, size - lesion / 2 - 1))
            lc = int(np.clip(lung_cx + rng.uniform(-3, 3), lesion / 2 + 1, size - lesion / 2 - 1))
            r0, c0 = lr - lesion // 2, lc - lesion // 2
            r1, c1 = r0 + lesion, c0 + lesion
            img[r0:r1, c0:c1] = 0.88 + 0.04 * rng.random((lesion, lesion))
            lesions[name] = (r0, c0, r1, c1)

        save_pixels(np.clip(img, 0.0, 1.0), img_dir / name)
        save_pixels(mask.astype(np.float64), mask_dir / f"img{i:04d}_mask.png")
        # row paths are manifest-relative so the corpus can be moved around
        img_rel = f"images/{name}"
        mask_rel = f"masks/img{i:04d}_mask.png"
        seg_rows.append([img_rel, "", mask_rel, "synth-lung", "unassigned", "frontal"])
        clf_rows.append(
            [img_rel, "covid" if covid else "control", "", "synth-cxr", "unassigned", "frontal"]
        )

    seg_manifest = root / "seg.csv"
    clf_manifest = root / "clf.csv"
    header = ["image_path", "label", "mask_path", "source", "split", "view"]
    for path, rows in ((seg_manifest, seg_rows), (clf_manifest, clf_rows)):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    with open(root / "lesions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "r0", "c0", "r1", "c1"])
        for name, box in lesions.items():
            writer.writerow([name, *box])
    return Corpus(root, seg_manifest, clf_manifest, lesions, n, size)
