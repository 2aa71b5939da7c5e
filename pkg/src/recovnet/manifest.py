"""Dataset manifests: typed records, CSV loading, and stratified splitting.

A manifest is a CSV file with the header
``image_path,label,mask_path,source,split,view``. Each row is either a
classification record (``label`` set, ``mask_path`` empty) or a
segmentation record (``mask_path`` set, ``label`` empty); a single
manifest never mixes the two. Relative paths in rows are resolved against
the directory containing the manifest file.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ManifestError
from .seeding import rng_from

LABELS = ("control", "covid")
SPLITS = ("train", "test", "unassigned")
VIEWS = ("frontal", "lateral", "unknown")
TASKS = ("classification", "segmentation")

MANIFEST_HEADER = ["image_path", "label", "mask_path", "source", "split", "view"]


@dataclass(frozen=True)
class SampleRecord:
    """One labeled image (classification) or image/mask pair (segmentation)."""

    image_path: str
    label: str | None = None
    mask_path: str | None = None
    source: str = ""
    split: str = "unassigned"
    view: str = "unknown"

    def __post_init__(self):
        if not self.image_path:
            raise ManifestError("record has an empty image_path")
        if self.label is not None and self.mask_path is not None:
            raise ManifestError(
                "ambiguous task: both label and mask_path are set"
            )
        if self.label is None and self.mask_path is None:
            raise ManifestError("record needs either a label or a mask_path")
        if self.label is not None and self.label not in LABELS:
            raise ManifestError(f"unknown label {self.label!r}; expected one of {LABELS}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if self.view not in VIEWS:
            raise ManifestError(f"unknown view {self.view!r}; expected one of {VIEWS}")

    @property
    def task(self) -> str:
        return "classification" if self.label is not None else "segmentation"


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable, ordered collection of records sharing one task."""

    records: tuple[SampleRecord, ...]
    task: str | None = None

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        task = self.task
        if task is not None and task not in TASKS:
            raise ManifestError(f"unknown task {task!r}")
        if records:
            if task is None:
                task = records[0].task
            for i, rec in enumerate(records):
                if rec.task != task:
                    raise ManifestError(
                        f"mixed tasks: record {i} is {rec.task}, manifest is {task}"
                    )
            object.__setattr__(self, "task", task)
        seen: set[str] = set()
        for rec in records:
            if rec.image_path in seen:
                raise ManifestError(f"duplicate image_path {rec.image_path!r}")
            seen.add(rec.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class SplitSpec:
    """Train fraction and seed for a deterministic stratified split."""

    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


def _resolve(path_text: str, base: Path) -> str:
    p = Path(path_text)
    return str(p) if p.is_absolute() else str(base / p)


def _absolute_base(manifest_path: Path) -> Path:
    return Path(os.path.abspath(manifest_path)).parent


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV into a validated :class:`DatasetManifest`.

    Relative row paths become absolute (anchored at the manifest's
    directory), so records stay valid wherever derived manifests are
    written. File-existence of the referenced images is checked lazily,
    when pixels are actually loaded, so manifests can be inspected and
    scored (for example in prediction-injection evaluation) without the
    image files present.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = _absolute_base(path)
    records: list[SampleRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header row") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: bad header {header!r}, expected {MANIFEST_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}"
                )
            image_path, label, mask_path, source, split, view = (v.strip() for v in row)
            try:
                rec = SampleRecord(
                    image_path=_resolve(image_path, base) if image_path else "",
                    label=label or None,
                    mask_path=_resolve(mask_path, base) if mask_path else None,
                    source=source,
                    split=split or "unassigned",
                    view=view or "unknown",
                )
            except ManifestError as err:
                raise ManifestError(f"{path}:{lineno}: {err}") from None
            records.append(rec)
    try:
        return DatasetManifest(tuple(records))
    except ManifestError as err:
        raise ManifestError(f"{path}: {err}") from None


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest back out with the canonical header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in manifest:
            writer.writerow(
                [
                    rec.image_path,
                    rec.label or "",
                    rec.mask_path or "",
                    rec.source,
                    rec.split,
                    rec.view,
                ]
            )
    return path


def _stratum_key(rec: SampleRecord) -> tuple[str, str]:
    return (rec.label or "", rec.source)


def stratified_split(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest]:
    """Partition a manifest into train and test sets, stratum by stratum.

    A stratum is a (label, source) group. Within each stratum the train
    count is ``round_half_up(train_fraction * stratum_size)``; membership
    is drawn from a stream seeded by ``spec.seed``, so a fixed
    (manifest, spec) pair always produces the same partition. Record order
    of the input is preserved in both outputs.
    """
    if not manifest.records:
        raise ManifestError("cannot split an empty manifest")
    for i, rec in enumerate(manifest):
        if rec.split != "unassigned":
            raise ManifestError(
                f"record {i} ({rec.image_path}) already has split={rec.split!r}"
            )
    groups: dict[tuple[str, str], list[int]] = {}
    for i, rec in enumerate(manifest):
        groups.setdefault(_stratum_key(rec), []).append(i)
    for key, idxs in groups.items():
        if len(idxs) < 2:
            raise ManifestError(
                f"stratum {key} has only {len(idxs)} record(s); need at least 2 to split"
            )

    rng = rng_from(spec.seed)
    train_idx: set[int] = set()
    for key in sorted(groups):
        idxs = groups[key]
        n = len(idxs)
        n_train = int(spec.train_fraction * n + 0.5)  # round half up
        perm = rng.permutation(n)
        train_idx.update(idxs[j] for j in perm[:n_train])

    train_records = []
    test_records = []
    for i, rec in enumerate(manifest):
        if i in train_idx:
            train_records.append(replace(rec, split="train"))
        else:
            test_records.append(replace(rec, split="test"))
    return (
        DatasetManifest(tuple(train_records), manifest.task),
        DatasetManifest(tuple(test_records), manifest.task),
    )
