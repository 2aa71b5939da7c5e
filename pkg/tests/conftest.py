import csv

import numpy as np
import pytest

from recovnet.imaging import save_pixels
from recovnet.manifest import MANIFEST_HEADER


def write_manifest_csv(path, rows):
    """Write raw manifest rows (lists of 6 strings) under the canonical header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return path


def write_gray_png(path, size=8, seed=0, value=None):
    rng = np.random.default_rng(seed)
    img = np.full((size, size), value, dtype=np.float64) if value is not None else rng.random((size, size))
    return save_pixels(img, path)


@pytest.fixture
def manifest_csv(tmp_path):
    """Three-record classification manifest with real image files."""
    rows = []
    for i, label in enumerate(["covid", "control", "covid"]):
        img = write_gray_png(tmp_path / f"img{i}.png", seed=i)
        rows.append([str(img), label, "", "srcA", "unassigned", "frontal"])
    return write_manifest_csv(tmp_path / "m.csv", rows)


def make_scaled_protocol_fixture(tmp_path):
    """Five-source manifest whose 0.8 split lands on the /1000-scaled
    training counts (87, 2, 3, 2, 4); only four sources get growth targets."""
    rows = []
    sized = {"chestx": 109, "bacterial": 3, "indiana": 4, "viral": 3}
    for source, total in sized.items():
        for i in range(total):
            if source == "chestx":
                rows.append([f"virtual/{source}_{i}.png", "control", "", source, "", ""])
            else:
                img = write_gray_png(
                    tmp_path / f"{source}_{i}.png", size=8, seed=hash((source, i)) % 2**32
                )
                rows.append([str(img), "control", "", source, "", ""])
    for i in range(5):
        img = write_gray_png(tmp_path / f"covid_{i}.png", size=8, seed=1000 + i)
        rows.append([str(img), "covid", "", "covid", "", ""])
    manifest = write_manifest_csv(tmp_path / "protocol.csv", rows)
    targets = "chestx=87,bacterial=5,indiana=5,viral=5,covid=10"
    expected = {"chestx": 87, "bacterial": 5, "indiana": 5, "viral": 5, "covid": 10}
    return manifest, targets, expected
