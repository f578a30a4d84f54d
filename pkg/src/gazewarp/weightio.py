"""Binary weight checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"DWRP"
    version u32      format version (currently 1)
    metalen u32      byte length of the metadata block
    meta             UTF-8 "key=value" lines describing the ModelConfig
    entries          one record per state array, in declaration order

Each record is: layer kind tag (u8: 1=conv, 2=batchnorm, 3=fully_connected),
rank (u8), extents (u32 each), then the raw float32 values. A layer
contributes its arrays in fixed order: weights, bias, and for batchnorm
additionally running mean and running variance, so a saved file reloads
bit-exactly.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, init_weights
from .tensor import LayerParams

MAGIC = b"DWRP"
VERSION = 1

_KIND_TAGS = {"conv": 1, "batchnorm": 2, "fully_connected": 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


class WeightFormatError(ValueError):
    """File does not conform to the checkpoint format."""


def _config_meta(config: ModelConfig, bn_epsilon: float, bn_momentum: float) -> bytes:
    lines = [
        f"variant={config.variant}",
        f"conv_layers_per_module={config.conv_layers_per_module}",
        f"channels_per_layer={config.channels_per_layer}",
        f"kernel_size={config.kernel_size}",
        f"first_kernel_size={config.first_kernel_size}",
        f"angle_dims={config.angle_dims}",
        f"input_h={config.input_size[0]}",
        f"input_w={config.input_size[1]}",
        f"bn_epsilon={bn_epsilon!r}",
        f"bn_momentum={bn_momentum!r}",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_meta(blob: bytes) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise WeightFormatError(f"malformed metadata line: {line!r}")
        k, v = line.split("=", 1)
        fields[k] = v
    return fields


def save_weights(weights: ModelWeights, path) -> None:
    layers = weights.all_layers()
    eps = layers[-1].epsilon if layers else 1e-5
    mom = layers[-1].momentum if layers else 0.1
    for lp in layers:
        if lp.kind == "batchnorm":
            eps, mom = lp.epsilon, lp.momentum
            break

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta = _config_meta(weights.config, eps, mom)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for layer in layers:
        tag = _KIND_TAGS[layer.kind]
        for tensor in layer.arrays():
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            buf.write(struct.pack("<BB", tag, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(4) != MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a weight file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    (metalen,) = struct.unpack("<I", buf.read(4))
    meta = _parse_meta(buf.read(metalen))

    try:
        config = ModelConfig(
            variant=meta["variant"],
            conv_layers_per_module=int(meta["conv_layers_per_module"]),
            channels_per_layer=int(meta["channels_per_layer"]),
            kernel_size=int(meta["kernel_size"]),
            first_kernel_size=int(meta.get("first_kernel_size", 5)),
            angle_dims=int(meta["angle_dims"]),
            input_size=(int(meta["input_h"]), int(meta["input_w"])),
        )
    except KeyError as e:
        raise WeightFormatError(f"{path}: metadata missing {e}") from None
    eps = float(meta.get("bn_epsilon", 1e-5))
    mom = float(meta.get("bn_momentum", 0.1))

    # rebuild the skeleton so shapes and ordering are authoritative
    weights = init_weights(config, seed=0, dtype=np.float32)
    for layer in weights.all_layers():
        expected_tag = _KIND_TAGS[layer.kind]
        if layer.kind == "batchnorm":
            layer.epsilon, layer.momentum = eps, mom
        for tensor in layer.arrays():
            header = buf.read(2)
            if len(header) < 2:
                raise WeightFormatError(f"{path}: truncated file")
            tag, rank = struct.unpack("<BB", header)
            if tag != expected_tag:
                raise WeightFormatError(
                    f"{path}: layer kind tag {tag} does not match expected "
                    f"{expected_tag} ({_TAG_KINDS.get(tag, '?')} vs {layer.kind})")
            shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
            if tuple(shape) != tensor.data.shape:
                raise WeightFormatError(f"{path}: shape {shape} does not match expected {tensor.data.shape}")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(buf.read(4 * count), dtype="<f4", count=count)
            tensor.data = data.reshape(shape).astype(np.float32)
    if buf.read(1):
        raise WeightFormatError(f"{path}: trailing bytes after the last layer")
    return weights
