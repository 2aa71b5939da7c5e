"""Single-file, versioned checkpoint container (.npz with JSON metadata).

The metadata block records the format version, the model kind, the
encoder/decoder specs, class order, and init seeds; the remaining entries
are the named parameter and buffer tensors. Loading rebuilds the model
from the stored specs and then overwrites every tensor, erroring (rather
than reshaping) on any mismatch. Writes are atomic: temp file + rename.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .layers import Dense
from .networks import (
    Classifier,
    DecoderSpec,
    EncoderSpec,
    SegNetwork,
    build_decoder,
    build_encoder,
)

FORMAT_VERSION = 1
_META_KEY = "__meta__"
_PARAM_PREFIX = "tensor:"


def _kind_of(model) -> str:
    if isinstance(model, SegNetwork):
        return "segmentation"
    if isinstance(model, Classifier):
        return "classifier"
    raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")


def save_checkpoint(model: SegNetwork | Classifier, path: str | Path) -> Path:
    """Serialize a model and its specs to ``path`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = _kind_of(model)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "encoder_spec": asdict(model.encoder.spec),
        "decoder_spec": asdict(model.decoder.spec) if kind == "segmentation" else None,
        "class_order": list(model.class_order) if kind == "classifier" else None,
        "seeds": model.seeds,
        "dtype": str(model.encoder.layers[0].params["w"].dtype),
    }
    arrays = {_PARAM_PREFIX + k: v for k, v in model.state_dict().items()}
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **{_META_KEY: np.array(json.dumps(meta))}, **arrays)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def _rebuild(meta: dict, dtype):
    enc_spec_dict = dict(meta["encoder_spec"])
    if enc_spec_dict.get("channels") is not None:
        enc_spec_dict["channels"] = tuple(enc_spec_dict["channels"])
    enc_spec = EncoderSpec(**enc_spec_dict)
    encoder = build_encoder(enc_spec, seed=0, dtype=dtype)
    if meta["kind"] == "segmentation":
        dec_spec_dict = dict(meta["decoder_spec"])
        dec_spec_dict["stage_filters"] = tuple(dec_spec_dict["stage_filters"])
        dec_spec_dict["kernel"] = tuple(dec_spec_dict["kernel"])
        dec_spec = DecoderSpec(**dec_spec_dict)
        decoder = build_decoder(dec_spec, enc_spec.output_channels, seed=0, dtype=dtype)
        return SegNetwork(encoder, decoder, seeds=meta.get("seeds") or {})
    dense = Dense("head.dense", enc_spec.output_channels, 2, dtype=dtype)
    return Classifier(
        encoder,
        dense,
        class_order=tuple(meta["class_order"]),
        seeds=meta.get("seeds") or {},
    )


def load_checkpoint(
    path: str | Path, expect_kind: str | None = None
) -> SegNetwork | Classifier:
    """Load a checkpoint, optionally asserting its kind.

    Raises :class:`CheckpointError` for missing, truncated, or otherwise
    unreadable files, for unknown format versions, for kind mismatches,
    and for any tensor whose name or shape disagrees with the stored spec.
    No partially initialized model ever escapes.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            if _META_KEY not in data.files:
                raise CheckpointError(f"{path}: not a checkpoint (missing metadata)")
            meta = json.loads(str(data[_META_KEY]))
            tensors = {
                k[len(_PARAM_PREFIX):]: np.array(data[k])
                for k in data.files
                if k.startswith(_PARAM_PREFIX)
            }
    except CheckpointError:
        raise
    except Exception as err:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({err})") from err

    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version!r}"
        )
    kind = meta.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(
            f"{path}: checkpoint holds a {kind} model, expected {expect_kind}"
        )
    try:
        dtype = np.dtype(meta.get("dtype", "float32"))
        model = _rebuild(meta, dtype)
        model.load_state_dict(tensors)
    except CheckpointError:
        raise
    except Exception as err:
        raise CheckpointError(f"{path}: checkpoint does not match its spec ({err})") from err
    return model
