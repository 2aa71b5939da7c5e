"""Network assembly: segmentation autoencoder and the transferred classifier.

The segmentation network is a plain encoder/decoder pair. The decoder sees
only the encoder's final feature map; there are no skip connections, so
its output is a function of that feature map alone. The classifier reuses
the (detached) encoder and adds global average pooling, a 2-way dense
layer, and softmax. Class index order is fixed: 0 = control, 1 = covid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2,
    ReLU,
    Sequential,
    Sigmoid,
    Softmax,
    UpsampleNearest2,
)
from .seeding import child_seed, rng_from

CLASS_ORDER = ("control", "covid")

REFERENCE_ENCODER = "reference"


def _log2_int(n: int) -> int:
    k = n.bit_length() - 1
    if n <= 0 or 2**k != n:
        raise ValueError(f"expected a positive power of 2, got {n}")
    return k


@dataclass(frozen=True)
class EncoderSpec:
    """Description of the feature extractor.

    Any model that maps (B, H, W, 3) to a (B, H/d, W/d, C) feature map can
    serve as the encoder; builders are looked up by ``name`` in a registry.
    The built-in reference encoder stacks conv/batch-norm/ReLU/max-pool
    blocks, one per factor-of-2 of downsampling.
    """

    name: str = REFERENCE_ENCODER
    downsample_factor: int = 32
    output_channels: int = 256
    init: str = "random"
    channels: tuple[int, ...] | None = None
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        _log2_int(self.downsample_factor)
        if self.init not in ("random", "pretrained-checkpoint"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def stages(self) -> int:
        return _log2_int(self.downsample_factor)

    def resolved_channels(self) -> tuple[int, ...]:
        ch = self.channels if self.channels is not None else tuple(
            16 * 2**i for i in range(self.stages)
        )
        if len(ch) != self.stages:
            raise ValueError(
                f"need {self.stages} channel widths for downsample "
                f"{self.downsample_factor}, got {len(ch)}"
            )
        if ch[-1] != self.output_channels:
            raise ValueError(
                f"output_channels={self.output_channels} does not match final width {ch[-1]}"
            )
        return ch


@dataclass(frozen=True)
class DecoderSpec:
    """Fixed five-stage upsampling stack reconstructing a 1-channel mask."""

    stages: int = 5
    stage_filters: tuple[int, ...] = (256, 128, 64, 32, 16)
    final_filters: int = 1
    kernel: tuple[int, int] = (3, 3)
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "stage_filters", tuple(int(f) for f in self.stage_filters))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if len(self.stage_filters) != self.stages:
            raise ValueError(
                f"stage_filters must have {self.stages} entries, got {len(self.stage_filters)}"
            )
        if self.final_filters != 1:
            raise ValueError(f"final_filters is fixed at 1, got {self.final_filters}")
        if self.kernel != (3, 3):
            raise ValueError(f"kernel is fixed at (3, 3), got {self.kernel}")


class Encoder(Sequential):
    def __init__(self, layers, spec: EncoderSpec):
        super().__init__(layers)
        self.spec = spec


class Decoder(Sequential):
    def __init__(self, layers, spec: DecoderSpec):
        super().__init__(layers)
        self.spec = spec


def _build_reference_encoder(spec: EncoderSpec, seed: int, dtype) -> Encoder:
    rng = rng_from(seed)
    layers = []
    cin = 3
    for i, ch in enumerate(spec.resolved_channels(), start=1):
        layers.append(Conv2D(f"block{i}.conv", cin, ch, kernel=3, rng=rng, dtype=dtype))
        layers.append(BatchNorm(f"block{i}.bn", ch, spec.bn_momentum, spec.bn_eps, dtype=dtype))
        layers.append(ReLU(f"block{i}.relu"))
        layers.append(MaxPool2(f"block{i}.pool"))
        cin = ch
    return Encoder(layers, spec)


_ENCODER_BUILDERS = {REFERENCE_ENCODER: _build_reference_encoder}


def register_encoder(name: str, builder) -> None:
    """Register a custom encoder builder under ``name``.

    The builder receives (spec, seed, dtype) and must return an
    :class:`Encoder` mapping (B, H, W, 3) to (B, H/d, W/d, C).
    """
    _ENCODER_BUILDERS[name] = builder


def build_encoder(spec: EncoderSpec, seed: int = 0, dtype=np.float32) -> Encoder:
    """Instantiate the encoder described by ``spec``, seeded for repeatability."""
    if spec.init == "pretrained-checkpoint":
        raise ValueError(
            "init='pretrained-checkpoint' encoders are produced by loading a "
            "checkpoint, not by build_encoder"
        )
    try:
        builder = _ENCODER_BUILDERS[spec.name]
    except KeyError:
        raise ValueError(
            f"no encoder builder registered for {spec.name!r}; "
            f"known: {sorted(_ENCODER_BUILDERS)}"
        ) from None
    return builder(spec, seed, dtype)


def build_decoder(
    spec: DecoderSpec, in_channels: int, seed: int = 0, dtype=np.float32
) -> Decoder:
    """Build the upsampling decoder: per stage, x2 upsample then twice
    (conv 3x3, batch norm, ReLU); finally a 1-filter conv with sigmoid."""
    rng = rng_from(seed)
    layers = []
    cin = in_channels
    for i, filters in enumerate(spec.stage_filters, start=1):
        layers.append(UpsampleNearest2(f"stage{i}.up"))
        layers.append(Conv2D(f"stage{i}.conv1", cin, filters, kernel=3, rng=rng, dtype=dtype))
        layers.append(BatchNorm(f"stage{i}.bn1", filters, spec.bn_momentum, spec.bn_eps, dtype=dtype))
        layers.append(ReLU(f"stage{i}.relu1"))
        layers.append(Conv2D(f"stage{i}.conv2", filters, filters, kernel=3, rng=rng, dtype=dtype))
        layers.append(BatchNorm(f"stage{i}.bn2", filters, spec.bn_momentum, spec.bn_eps, dtype=dtype))
        layers.append(ReLU(f"stage{i}.relu2"))
        cin = filters
    layers.append(
        Conv2D("out.conv", cin, spec.final_filters, kernel=3, rng=rng, dtype=dtype, init="glorot")
    )
    layers.append(Sigmoid("out.sigmoid"))
    return Decoder(layers, spec)


class SegNetwork:
    """Segmentation autoencoder: encoder features straight into the decoder."""

    def __init__(
        self,
        encoder: Encoder,
        decoder: Decoder,
        seeds: dict[str, int] | None = None,
    ):
        if 2**decoder.spec.stages != encoder.spec.downsample_factor:
            raise ValueError(
                f"decoder restores x{2**decoder.spec.stages} but encoder "
                f"downsamples x{encoder.spec.downsample_factor}"
            )
        self.encoder = encoder
        self.decoder = decoder
        self.seeds = dict(seeds or {})

    def _check_input(self, batch: np.ndarray) -> None:
        d = self.encoder.spec.downsample_factor
        if batch.ndim != 4 or batch.shape[3] != 3:
            raise ValueError(f"expected (B, H, W, 3) input, got {batch.shape}")
        if batch.shape[1] % d or batch.shape[2] % d:
            raise ValueError(
                f"input spatial dims {batch.shape[1:3]} must be divisible by {d}"
            )

    def forward(self, batch: np.ndarray, training: bool = False) -> np.ndarray:
        self._check_input(batch)
        return self.decoder.forward(self.encoder.forward(batch, training), training)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.encoder.backward(self.decoder.backward(grad))

    def encode(self, batch: np.ndarray, training: bool = False) -> np.ndarray:
        self._check_input(batch)
        return self.encoder.forward(batch, training)

    def decode(self, features: np.ndarray, training: bool = False) -> np.ndarray:
        return self.decoder.forward(features, training)

    def trainable(self):
        for item in self.encoder.trainable():
            yield item
        for item in self.decoder.trainable():
            yield item

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def load_state_dict(self, entries: dict[str, np.ndarray]) -> None:
        enc = {k[8:]: v for k, v in entries.items() if k.startswith("encoder.")}
        dec = {k[8:]: v for k, v in entries.items() if k.startswith("decoder.")}
        if len(enc) + len(dec) != len(entries):
            bad = [k for k in entries if not k.startswith(("encoder.", "decoder."))]
            raise ValueError(f"unexpected state entries {bad}")
        self.encoder.load_state_dict(enc)
        self.decoder.load_state_dict(dec)


def build_segmentation_network(
    encoder_spec: EncoderSpec | None = None,
    decoder_spec: DecoderSpec | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> SegNetwork:
    """Assemble a freshly initialized segmentation network."""
    encoder_spec = encoder_spec or EncoderSpec()
    decoder_spec = decoder_spec or DecoderSpec()
    enc_seed = child_seed(seed, 0)
    dec_seed = child_seed(seed, 1)
    encoder = build_encoder(encoder_spec, enc_seed, dtype)
    decoder = build_decoder(decoder_spec, encoder_spec.output_channels, dec_seed, dtype)
    return SegNetwork(encoder, decoder, seeds={"encoder_init": enc_seed, "decoder_init": dec_seed})


def seg_forward(net: SegNetwork, batch: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass returning (B, H, W, 1) probabilities.

    Outputs are clamped to the open interval (0, 1) so downstream log
    terms stay finite even for saturated float32 sigmoids.
    """
    pred = net.forward(batch, training=False)
    return np.clip(pred, 1e-7, 1.0 - 1e-7)


def binarize_mask(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Elementwise ``pred >= threshold`` as float 0/1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pred = np.asarray(pred)
    return (pred >= threshold).astype(pred.dtype)


def detach_encoder(net: SegNetwork) -> Encoder:
    """Copy the encoder out of a segmentation network.

    The returned encoder owns its parameters: mutating it leaves the
    source network untouched, and its values are identical to the
    network's encoder at call time.
    """
    dtype = net.encoder.layers[0].params["w"].dtype
    fresh = build_encoder(net.encoder.spec, seed=0, dtype=dtype)
    fresh.load_state_dict(net.encoder.state_dict())
    return fresh


class Classifier:
    """Encoder, global average pooling, 2-way dense head, softmax."""

    def __init__(
        self,
        encoder: Encoder,
        dense: Dense,
        class_order: tuple[str, str] = CLASS_ORDER,
        seeds: dict[str, int] | None = None,
    ):
        self.encoder = encoder
        self.gap = GlobalAvgPool("head.gap")
        self.dense = dense
        self.softmax = Softmax("head.softmax")
        self.class_order = tuple(class_order)
        self.seeds = dict(seeds or {})

    def forward(self, batch: np.ndarray, training: bool = False) -> np.ndarray:
        feats = self.encoder.forward(batch, training)
        pooled = self.gap.forward(feats, training)
        logits = self.dense.forward(pooled, training)
        return self.softmax.forward(logits, training)

    def backward(self, grad_probs: np.ndarray) -> np.ndarray:
        g = self.softmax.backward(grad_probs)
        g = self.dense.backward(g)
        g = self.gap.backward(g)
        return self.encoder.backward(g)

    def trainable(self):
        for item in self.encoder.trainable():
            yield item
        for key in self.dense.params:
            yield f"head.dense.{key}", self.dense, key

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        for key, val in self.dense.params.items():
            out[f"head.dense.{key}"] = val.copy()
        return out

    def load_state_dict(self, entries: dict[str, np.ndarray]) -> None:
        enc = {k[8:]: v for k, v in entries.items() if k.startswith("encoder.")}
        head = {k[11:]: v for k, v in entries.items() if k.startswith("head.dense.")}
        if len(enc) + len(head) != len(entries):
            bad = [k for k in entries if not k.startswith(("encoder.", "head.dense."))]
            raise ValueError(f"unexpected state entries {bad}")
        self.encoder.load_state_dict(enc)
        for key, arr in head.items():
            if key not in self.dense.params:
                raise ValueError(f"unexpected head entry {key!r}")
            if self.dense.params[key].shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for head.dense.{key}: "
                    f"have {self.dense.params[key].shape}, got {arr.shape}"
                )
            self.dense.params[key] = np.array(arr, copy=True)


def build_classifier(encoder: Encoder, head_seed: int = 0) -> Classifier:
    """Attach a randomly initialized 2-way head to an encoder.

    The encoder is used as passed (typically the output of
    :func:`detach_encoder`) and stays trainable; nothing is frozen.
    """
    dtype = encoder.layers[0].params["w"].dtype
    dense = Dense(
        "head.dense",
        encoder.spec.output_channels,
        len(CLASS_ORDER),
        rng=rng_from(head_seed),
        dtype=dtype,
    )
    return Classifier(encoder, dense, seeds={"head_init": head_seed})


def classify(clf: Classifier, batch: np.ndarray) -> np.ndarray:
    """Inference-mode class probabilities, shape (B, 2), rows summing to 1."""
    return clf.forward(batch, training=False)


def predict_label(probs: np.ndarray, class_order: tuple[str, str] = CLASS_ORDER) -> list[str]:
    """Argmax labels; an exact tie resolves to the negative class."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(f"expected (B, 2) probabilities, got {probs.shape}")
    positive = probs[:, 1] > probs[:, 0]
    return [class_order[1] if p else class_order[0] for p in positive]
