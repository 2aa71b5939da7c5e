"""Dataset-level augmentation: grow manifests to per-class target counts.

Augmented variants are materialized to disk as 8-bit PNGs named
``<stem>__aug<k>.png``, so target counts are literal file counts. The
random stream of each variant is keyed by (seed, original index, k);
results are therefore independent of processing order.
"""

from __future__ import annotations

import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .imaging import AugmentationSpec, draw_shift_rotation, read_pixels, save_pixels, shift_rotate
from .manifest import DatasetManifest, SampleRecord
from .seeding import child_seed, rng_from


def plan_augmentation(n_records: int, target_count: int) -> list[int]:
    """Per-original variant counts for growing ``n_records`` to ``target_count``.

    Originals are cycled round-robin, so no original receives more than one
    variant beyond any other. The counts sum to ``target_count - n_records``.
    """
    if n_records < 1:
        raise ValueError("nothing to augment: no records")
    if target_count < n_records:
        raise ValueError(
            f"target {target_count} is below the current record count {n_records}"
        )
    extra = target_count - n_records
    base, rem = divmod(extra, n_records)
    return [base + (1 if i < rem else 0) for i in range(n_records)]


def _variant_paths(rec: SampleRecord, k: int, out_dir: Path | None) -> tuple[Path, Path | None]:
    if out_dir is not None:
        out_dir = Path(os.path.abspath(out_dir))
    src = Path(os.path.abspath(rec.image_path))
    img_dir = out_dir if out_dir is not None else src.parent
    img_out = img_dir / f"{src.stem}__aug{k}.png"
    mask_out = None
    if rec.mask_path is not None:
        msrc = Path(os.path.abspath(rec.mask_path))
        mask_dir = out_dir if out_dir is not None else msrc.parent
        mask_out = mask_dir / f"{msrc.stem}__aug{k}.png"
    return img_out, mask_out


def augment_to_target(
    manifest: DatasetManifest,
    target_count: int,
    spec: AugmentationSpec,
    seed: int,
    out_dir: str | Path | None = None,
) -> DatasetManifest:
    """Grow a training manifest to exactly ``target_count`` records.

    All originals are kept unmodified; the remainder are warped copies
    written next to their sources (or into ``out_dir``). For segmentation
    records the mask is warped with the same parameters as the image,
    using nearest-neighbor sampling so it stays binary.
    """
    n = len(manifest)
    if n == 0:
        raise ManifestError("cannot augment an empty manifest")
    for i, rec in enumerate(manifest):
        if rec.split != "train":
            raise ManifestError(
                f"record {i} ({rec.image_path}) has split={rec.split!r}; "
                "augmentation applies to training records only"
            )
    counts = plan_augmentation(n, target_count)
    if target_count == n:
        return manifest

    out = Path(out_dir) if out_dir is not None else None
    new_records: list[SampleRecord] = []
    pixel_cache: dict[str, np.ndarray] = {}
    extra = target_count - n
    for j in range(extra):
        i = j % n
        k = j // n + 1
        assert k <= counts[i]
        rec = manifest.records[i]
        if rec.image_path not in pixel_cache:
            pixel_cache[rec.image_path] = read_pixels(rec.image_path)
        pixels = pixel_cache[rec.image_path]
        rng = rng_from(seed, i, k)
        dx, dy, theta = draw_shift_rotation(pixels.shape, spec, rng)
        img_out, mask_out = _variant_paths(rec, k, out)
        save_pixels(shift_rotate(pixels, dx, dy, theta, interp="bilinear"), img_out)
        if rec.mask_path is not None:
            key = f"mask:{rec.mask_path}"
            if key not in pixel_cache:
                mask = read_pixels(rec.mask_path)
                if mask.ndim == 3:
                    mask = mask.mean(axis=2)
                pixel_cache[key] = (mask > 0.5).astype(np.float32)
            warped = shift_rotate(pixel_cache[key], dx, dy, theta, interp="nearest")
            save_pixels(warped, mask_out)
        new_records.append(
            replace(
                rec,
                image_path=str(img_out),
                mask_path=str(mask_out) if mask_out is not None else None,
            )
        )
    return DatasetManifest(manifest.records + tuple(new_records), manifest.task)


def build_training_set(
    manifests: list[DatasetManifest],
    targets: list[int],
    spec: AugmentationSpec,
    seed: int,
    out_dir: str | Path | None = None,
) -> DatasetManifest:
    """Augment each class manifest to its target and merge into one set.

    Classes whose target equals their current count pass through untouched.
    The concatenated records are shuffled deterministically by ``seed``.
    """
    if len(manifests) != len(targets):
        raise ValueError(
            f"got {len(manifests)} manifests but {len(targets)} targets"
        )
    grown: list[SampleRecord] = []
    task = None
    for gi, (part, target) in enumerate(zip(manifests, targets)):
        if task is None:
            task = part.task
        if target == len(part):
            grown.extend(part.records)
        else:
            grown.extend(
                augment_to_target(part, target, spec, child_seed(seed, gi), out_dir).records
            )
    perm = rng_from(seed).permutation(len(grown))
    return DatasetManifest(tuple(grown[i] for i in perm), task)
