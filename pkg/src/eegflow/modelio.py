"""Single-file model format.

Layout (all integers little-endian)::

    b"SGFL"            magic
    u32                format version
    u32                length L of the header
    L bytes            UTF-8 JSON header: input shape, class and channel names,
                       sample rate, layer list with the name and shape of
                       every parameter, prior shape
    float64 LE blobs   parameters in header order, prior means, prior log-stds
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import ChannelRoll, Coupling, FlowModel, Hartley, Squeeze, Subnet
from .prior import ClassConditionalGaussian

MAGIC = b"SGFL"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def _layer_header(layer) -> dict:
    return {"kind": layer.kind,
            "params": [{"name": p.name, "shape": list(p.shape)} for p in layer.params()]}


def model_to_bytes(model: FlowModel) -> bytes:
    header = {
        "input_shape": list(model.input_shape),
        "class_names": list(model.class_names),
        "channel_names": list(model.channel_names),
        "sample_rate_hz": float(model.sample_rate_hz),
        "layers": [_layer_header(layer) for layer in model.layers],
        "prior": {"shape": list(model.prior.means.shape)},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [p.value.astype("<f8").tobytes() for p in model.params()]
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(blobs)


def save_model(model: FlowModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(buf: bytes) -> FlowModel:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, head_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version}, expected {VERSION}")
    if 12 + head_len > len(buf):
        raise ModelFormatError("model file truncated inside header")
    try:
        header = json.loads(buf[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    offset = 12 + head_len

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if count < 0 or end > len(buf):
            raise ModelFormatError("model file truncated inside parameter data")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset = end
        return arr.reshape(shape)

    try:
        layers = []
        for spec in header["layers"]:
            kind = spec["kind"]
            if kind == "squeeze":
                layers.append(Squeeze())
            elif kind == "roll":
                layers.append(ChannelRoll())
            elif kind == "hartley":
                layers.append(Hartley())
            elif kind == "coupling":
                ps = spec["params"]
                if len(ps) != 8:
                    raise ModelFormatError("coupling layer needs 8 parameter arrays")
                vals = [take(tuple(p["shape"])) for p in ps]
                base = ps[0]["name"].rsplit(".", 2)[0]
                layers.append(Coupling(Subnet(*vals[:4], name=f"{base}.F"),
                                       Subnet(*vals[4:], name=f"{base}.G")))
            else:
                raise ModelFormatError(f"unknown layer kind {kind!r}")
        pshape = tuple(header["prior"]["shape"])
        prior = ClassConditionalGaussian(take(pshape), take(pshape))
        model = FlowModel(layers, prior, tuple(header["input_shape"]), list(header["class_names"]),
                          list(header.get("channel_names", [])), float(header.get("sample_rate_hz", 1.0)))
    except (KeyError, TypeError, IndexError) as exc:
        raise ModelFormatError(f"malformed model header: {exc!r}") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"inconsistent model file: {exc}") from None
    if offset != len(buf):
        raise ModelFormatError(f"{len(buf) - offset} trailing bytes after model data")
    return model


def load_model(path) -> FlowModel:
    return model_from_bytes(Path(path).read_bytes())
