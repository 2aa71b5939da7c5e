"""Two-phase training: segmentation pretraining and classifier fine-tuning.

Both loops use Adam, seeded epoch shuffling, and report the per-epoch mean
loss weighted by batch size. Given identical data, config, and seed, the
loss curve is reproducible bit for bit in single-threaded execution. When
a run directory is supplied, it receives ``config.echo``, ``history.csv``
(columns epoch, mean_loss, seconds) and the final ``model.ckpt``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (public API)
from .errors import ManifestError
from .imaging import load_image, load_mask, resize_image
from .losses import (
    categorical_cross_entropy,
    categorical_cross_entropy_grad,
    hybrid_segmentation_loss,
    hybrid_segmentation_loss_grad,
)
from .manifest import DatasetManifest
from .networks import CLASS_ORDER, Classifier, SegNetwork
from .seeding import rng_from


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings. Adam is the only supported optimizer."""

    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError(f"epochs must be > 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


PHASE_I_DEFAULTS = TrainConfig(epochs=15, learning_rate=1e-4, batch_size=32)
PHASE_II_DEFAULTS = TrainConfig(epochs=15, learning_rate=1e-5, batch_size=64)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    seconds: float


@dataclass
class TrainHistory:
    """Per-epoch statistics plus an echo of the run configuration."""

    epochs: list[EpochStats] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_path: str | None = None

    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "seconds"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.mean_loss), f"{e.seconds:.3f}"])
        return path


class Adam:
    """Adam with bias correction; epsilon fixed at 1e-7."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, items) -> None:
        """Apply one update to every (name, layer, key) parameter triple."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, layer, key in items:
            g = layer.grads[key]
            p = layer.params[key]
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _resize_if_needed(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    return resize_image(arr, size, size)


def load_segmentation_arrays(
    manifest: DatasetManifest, image_size: int, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize a segmentation manifest as (x, masks) arrays."""
    if manifest.task != "segmentation":
        raise ManifestError(f"expected a segmentation manifest, got task={manifest.task!r}")
    xs, ms = [], []
    for rec in manifest:
        img = load_image(rec.image_path)
        mask = load_mask(rec.mask_path)
        if img.shape[:2] != mask.shape[:2]:
            raise ManifestError(
                f"{rec.image_path}: image {img.shape[:2]} and mask "
                f"{mask.shape[:2]} shapes differ"
            )
        xs.append(_resize_if_needed(img, image_size))
        mask = _resize_if_needed(mask, image_size)
        ms.append((mask > 0.5).astype(dtype)[..., None])
    return np.stack(xs).astype(dtype), np.stack(ms)


def load_classification_arrays(
    manifest: DatasetManifest, image_size: int, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Materialize a classification manifest as (x, onehot, labels)."""
    if manifest.task != "classification":
        raise ManifestError(f"expected a classification manifest, got task={manifest.task!r}")
    xs, labels = [], []
    for rec in manifest:
        xs.append(_resize_if_needed(load_image(rec.image_path), image_size))
        labels.append(rec.label)
    onehot = np.zeros((len(labels), len(CLASS_ORDER)), dtype=dtype)
    for i, lab in enumerate(labels):
        onehot[i, CLASS_ORDER.index(lab)] = 1.0
    return np.stack(xs).astype(dtype), onehot, labels


def _config_echo(cfg: TrainConfig, extra: dict) -> dict:
    echo = {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "optimizer": cfg.optimizer,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
    }
    echo.update(extra)
    return echo


def _write_run_dir(model, history: TrainHistory, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.echo", "w") as fh:
        for key in sorted(history.config):
            fh.write(f"{key}={history.config[key]}\n")
    history.write_csv(run_dir / "history.csv")
    ckpt = save_checkpoint(model, run_dir / "model.ckpt")
    history.checkpoint_path = str(ckpt)


def _run_epochs(model, x, t, cfg, loss_fn, grad_fn) -> TrainHistory:
    n = x.shape[0]
    rng = rng_from(cfg.seed)
    adam = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    items = list(model.trainable())
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = x[idx]
            tb = t[idx]
            pred = model.forward(xb, training=True)
            loss = loss_fn(pred, tb)
            grad = grad_fn(pred, tb)
            model.backward(grad.astype(pred.dtype, copy=False))
            adam.step(items)
            total += loss * len(idx)
        history.epochs.append(
            EpochStats(epoch, total / n, time.perf_counter() - t0)
        )
    return history


def train_segmentation(
    net: SegNetwork,
    data: DatasetManifest,
    cfg: TrainConfig = PHASE_I_DEFAULTS,
    image_size: int = 224,
    run_dir: str | Path | None = None,
    alpha: float = 0.25,
    gamma: float = 2.0,
    smooth: float = 1.0,
) -> tuple[SegNetwork, TrainHistory]:
    """Minimize the hybrid focal+dice loss over (image, mask) pairs."""
    if len(data) == 0:
        raise ManifestError("cannot train on an empty manifest")
    x, masks = load_segmentation_arrays(data, image_size)
    history = _run_epochs(
        net,
        x,
        masks,
        cfg,
        lambda p, t: hybrid_segmentation_loss(p, t, alpha, gamma, smooth),
        lambda p, t: hybrid_segmentation_loss_grad(p, t, alpha, gamma, smooth),
    )
    history.config = _config_echo(
        cfg,
        {
            "phase": "segmentation",
            "image_size": image_size,
            "focal_alpha": alpha,
            "focal_gamma": gamma,
            "dice_smooth": smooth,
            "samples": len(data),
        },
    )
    if run_dir is not None:
        _write_run_dir(net, history, Path(run_dir))
    return net, history


def train_classifier(
    clf: Classifier,
    data: DatasetManifest,
    cfg: TrainConfig = PHASE_II_DEFAULTS,
    image_size: int = 224,
    run_dir: str | Path | None = None,
) -> tuple[Classifier, TrainHistory]:
    """Minimize categorical cross-entropy over every parameter.

    The encoder is fine-tuned along with the head; no parameters are
    frozen, which the config echo records as ``unfrozen=true``.
    """
    if len(data) == 0:
        raise ManifestError("cannot train on an empty manifest")
    x, onehot, _ = load_classification_arrays(data, image_size)
    history = _run_epochs(
        clf,
        x,
        onehot,
        cfg,
        categorical_cross_entropy,
        categorical_cross_entropy_grad,
    )
    history.config = _config_echo(
        cfg,
        {
            "phase": "classification",
            "image_size": image_size,
            "unfrozen": "true",
            "class_order": ",".join(clf.class_order),
            "samples": len(data),
        },
    )
    if run_dir is not None:
        _write_run_dir(clf, history, Path(run_dir))
    return clf, history
