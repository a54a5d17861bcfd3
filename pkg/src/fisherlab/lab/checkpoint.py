"""FLCK checkpoint container.

Layout (little-endian):
    magic "FLCK" | u8 version | u32 n | n bytes UTF-8 JSON model spec
    | u64 P | P float64 parameters
    | u8 has_velocity | [P float64 velocity | f64 momentum | f64 weight_decay]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import ParamVector
from ..nets import ModelSpec
from ..optim import SgdState

MAGIC = b"FLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_spec(spec: ModelSpec) -> bytes:
    doc = {
        "kind": spec.kind,
        "input_shape": list(spec.input_shape),
        "n_classes": spec.n_classes,
        "hidden": list(spec.hidden),
        "activation": spec.activation,
        "channels": list(spec.channels),
        "kernel": spec.kernel,
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def decode_spec(raw: bytes) -> ModelSpec:
    doc = json.loads(raw.decode("utf-8"))
    return ModelSpec(
        kind=doc["kind"],
        input_shape=tuple(doc["input_shape"]),
        n_classes=doc["n_classes"],
        hidden=tuple(doc["hidden"]),
        activation=doc["activation"],
        channels=tuple(doc["channels"]),
        kernel=doc["kernel"],
    )


def checkpoint_bytes(spec: ModelSpec, theta: ParamVector, state: SgdState | None = None) -> bytes:
    theta.check_layout(spec.layout)
    spec_raw = encode_spec(spec)
    parts = [MAGIC, struct.pack("<BI", VERSION, len(spec_raw)), spec_raw]
    parts.append(struct.pack("<Q", theta.data.size))
    parts.append(np.ascontiguousarray(theta.data, dtype="<f8").tobytes())
    if state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(np.ascontiguousarray(state.velocity.data, dtype="<f8").tobytes())
        parts.append(struct.pack("<dd", state.momentum, state.weight_decay))
    return b"".join(parts)


def save_checkpoint(path, spec: ModelSpec, theta: ParamVector, state: SgdState | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, theta, state))


def parse_checkpoint(raw: bytes) -> tuple[ModelSpec, ParamVector, SgdState | None]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not an FLCK checkpoint")
    pos = 4
    try:
        version, n = struct.unpack_from("<BI", raw, pos)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos += 5
        spec = decode_spec(raw[pos : pos + n])
        pos += n
        (p,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if p != spec.n_params:
            raise CheckpointError(f"parameter count {p} does not match the model ({spec.n_params})")
        if len(raw) < pos + 8 * p + 1:
            raise CheckpointError("truncated parameter section")
        theta = ParamVector(np.frombuffer(raw, dtype="<f8", count=p, offset=pos).astype(np.float64), spec.layout)
        pos += 8 * p
        has_velocity = raw[pos]
        pos += 1
        state = None
        if has_velocity:
            if len(raw) < pos + 8 * p + 16:
                raise CheckpointError("truncated velocity section")
            vel = np.frombuffer(raw, dtype="<f8", count=p, offset=pos).astype(np.float64)
            pos += 8 * p
            momentum, wd = struct.unpack_from("<dd", raw, pos)
            state = SgdState(ParamVector(vel, spec.layout), momentum, wd)
    except (struct.error, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return spec, theta, state


def load_checkpoint(path) -> tuple[ModelSpec, ParamVector, SgdState | None]:
    return parse_checkpoint(Path(path).read_bytes())
