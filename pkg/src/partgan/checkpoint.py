"""Binary checkpoints for networks, optimizer states and GAN pairs.

Layout: the 8-byte magic ``PGANCKP1``, a little-endian u64 header length, a
UTF-8 JSON header, then raw little-endian float64 arrays. Each header entry
under ``arrays`` names an array with its element ``offset`` (counted in
float64 values from the start of the blob section) and ``shape``.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .gan import GanPair, LabelSpec, LatentSpec
from .nn import Network, layer_from_dict
from .optim import AdamState

MAGIC = b"PGANCKP1"


class CheckpointError(ValueError):
    pass


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries[name] = {"offset": offset, "shape": list(a.shape)}
        blobs.append(a.tobytes())
        offset += a.size
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError("checkpoint ends inside the header length")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError("checkpoint ends inside the JSON header")
    header = json.loads(raw[16 : 16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for name, entry in header["arrays"].items():
        count = math.prod(entry["shape"])
        start = base + 8 * entry["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"array {name!r} runs past end of checkpoint")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(entry["shape"]).astype(np.float64)
    return header["meta"], arrays


def _network_parts(prefix: str, net: Network):
    meta = {
        "layers": [layer.to_dict() for layer in net.layers],
        "input_shape": list(net.input_shape),
        "mode": net.mode,
    }
    arrays = {f"{prefix}.params": net.params}
    for i, buf in enumerate(net.buffers):
        for key, value in (buf or {}).items():
            arrays[f"{prefix}.buffer.{i}.{key}"] = value
    return meta, arrays


def _network_from(prefix: str, meta: dict, arrays: dict) -> Network:
    layers = [layer_from_dict(d) for d in meta["layers"]]
    net = Network(layers, tuple(meta["input_shape"]), arrays[f"{prefix}.params"], mode=meta["mode"])
    for i, buf in enumerate(net.buffers):
        for key in buf or {}:
            buf[key] = arrays[f"{prefix}.buffer.{i}.{key}"]
    return net


def _adam_parts(prefix: str, state: AdamState):
    return state.hyperparams(), {f"{prefix}.m": state.m, f"{prefix}.v": state.v}


def _adam_from(prefix: str, meta: dict, arrays: dict) -> AdamState:
    return AdamState(arrays[f"{prefix}.m"], arrays[f"{prefix}.v"], **meta)


def adam_to_bytes(state: AdamState) -> bytes:
    meta, arrays = _adam_parts("adam", state)
    return encode({"adam": meta}, arrays)


def adam_from_bytes(raw: bytes) -> AdamState:
    meta, arrays = decode(raw)
    return _adam_from("adam", meta["adam"], arrays)


def pair_to_bytes(pair: GanPair, extra: dict | None = None) -> bytes:
    g_meta, g_arr = _network_parts("generator", pair.generator)
    d_meta, d_arr = _network_parts("discriminator", pair.discriminator)
    og_meta, og_arr = _adam_parts("opt_g", pair.opt_g)
    od_meta, od_arr = _adam_parts("opt_d", pair.opt_d)
    meta = {
        "format": "partgan-pair",
        "generator": g_meta,
        "discriminator": d_meta,
        "opt_g": og_meta,
        "opt_d": od_meta,
        "d_z": pair.latent.d_z,
        "d_y": pair.label.d_y,
        "prob_clamp": pair.prob_clamp,
        "d_steps": pair.d_steps,
        "extra": extra or {},
    }
    return encode(meta, {**g_arr, **d_arr, **og_arr, **od_arr})


def pair_from_bytes(raw: bytes) -> tuple[GanPair, dict]:
    meta, arrays = decode(raw)
    if meta.get("format") != "partgan-pair":
        raise CheckpointError("not a GAN pair checkpoint")
    pair = GanPair(
        _network_from("generator", meta["generator"], arrays),
        _network_from("discriminator", meta["discriminator"], arrays),
        LatentSpec(meta["d_z"]),
        LabelSpec(meta["d_y"]),
        _adam_from("opt_g", meta["opt_g"], arrays),
        _adam_from("opt_d", meta["opt_d"], arrays),
        meta["prob_clamp"],
        meta["d_steps"],
    )
    return pair, meta["extra"]


def save_pair(pair: GanPair, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(pair_to_bytes(pair, extra))


def load_pair(path) -> tuple[GanPair, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    return pair_from_bytes(path.read_bytes())


def network_to_bytes(net: Network, extra: dict | None = None) -> bytes:
    meta, arrays = _network_parts("network", net)
    return encode({"format": "partgan-network", "network": meta, "extra": extra or {}}, arrays)


def network_from_bytes(raw: bytes) -> tuple[Network, dict]:
    meta, arrays = decode(raw)
    if meta.get("format") != "partgan-network":
        raise CheckpointError("not a network checkpoint")
    return _network_from("network", meta["network"], arrays), meta["extra"]
