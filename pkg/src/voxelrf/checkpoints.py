"""Versioned binary checkpoint container for radiance fields.

Layout (all little-endian):

    magic   8 bytes  b"VXRFCKP1"
    version u32
    hlen    u64      length of the JSON header
    header  hlen bytes of UTF-8 JSON (grid names/shapes, network shapes,
                     activation parameters, training step, config)
    per grid, in header order:
        channels u32, nx u32, ny u32, nz u32,
        bounds 6 x f64, values channels*nx*ny*nz x f32
    per network parameter, in sorted key order: f32 array
    trailer: u64 byte count of everything above, u32 CRC-32 of the same

Grid and network values are stored as 32-bit floats; fields kept in float32
round-trip losslessly.  A JSON sidecar (<path>.json) duplicates the config
and training step for human inspection.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .errors import CheckpointFormatError
from .grids import DensityActivation, VoxelGrid
from .mlp import ColorMLP
from .rendering import RadianceField

MAGIC = b"VXRFCKP1"
VERSION = 1


def save_checkpoint(field: RadianceField, path, step=0, config=None) -> None:
    """Atomically write a field checkpoint plus its JSON sidecar."""
    grids = [("density", field.density), ("color", field.color)]
    header = {
        "step": int(step),
        "config": config or {},
        "mode": field.mode,
        "activation": {"alpha_init": field.activation.alpha_init,
                       "voxel_size": field.activation.voxel_size},
        "grids": [{"name": name, "channels": g.channels,
                   "resolution": list(g.resolution)} for name, g in grids],
        "network": None,
    }
    if field.net is not None:
        header["network"] = {
            "feature_dim": field.net.feature_dim,
            "hidden_dim": field.net.hidden_dim,
            "view_freqs": field.net.view_freqs,
            "params": {k: list(v.shape) for k, v in field.net.params.items()},
        }
    hbytes = json.dumps(header).encode()

    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    for _, g in grids:
        parts.append(struct.pack("<IIII", g.channels, *g.resolution))
        parts.append(np.concatenate([g.bounds_min, g.bounds_max])
                     .astype("<f8").tobytes())
        parts.append(np.ascontiguousarray(g.values).astype("<f4").tobytes())
    if field.net is not None:
        for key in sorted(field.net.params):
            parts.append(np.ascontiguousarray(field.net.params[key])
                         .astype("<f4").tobytes())
    body = b"".join(parts)
    blob = body + struct.pack("<QI", len(body), zlib.crc32(body))

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    with open(path + ".json", "w") as f:
        json.dump({"step": int(step), "config": config or {}}, f, indent=1)


def load_checkpoint(path):
    """Load a checkpoint; returns (field, step, config)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 24 or not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"not a checkpoint file: {path}")
    body, trailer = blob[:-12], blob[-12:]
    length, crc = struct.unpack("<QI", trailer)
    if length != len(body):
        raise CheckpointFormatError(
            f"truncated checkpoint: expected {length} body bytes, "
            f"found {len(body)}")
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checkpoint failed its CRC check")

    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", body, off)
    off += 12
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version} (this build reads "
            f"{VERSION})")
    header = json.loads(body[off:off + hlen].decode())
    off += hlen

    grids = {}
    for meta in header["grids"]:
        channels, nx, ny, nz = struct.unpack_from("<IIII", body, off)
        off += 16
        bounds = np.frombuffer(body, "<f8", count=6, offset=off)
        off += 48
        count = channels * nx * ny * nz
        values = np.frombuffer(body, "<f4", count=count, offset=off)
        off += 4 * count
        grids[meta["name"]] = VoxelGrid(
            values.reshape(channels, nx, ny, nz).copy(),
            bounds[:3].copy(), bounds[3:].copy())

    net = None
    if header["network"] is not None:
        meta = header["network"]
        net = ColorMLP(feature_dim=meta["feature_dim"],
                       hidden_dim=meta["hidden_dim"],
                       view_freqs=meta["view_freqs"])
        params = {}
        for key in sorted(meta["params"]):
            shape = tuple(meta["params"][key])
            count = int(np.prod(shape))
            params[key] = np.frombuffer(body, "<f4", count=count,
                                        offset=off).reshape(shape).copy()
            off += 4 * count
        net.params = params

    act = DensityActivation(header["activation"]["alpha_init"],
                            header["activation"]["voxel_size"])
    field = RadianceField(grids["density"], grids["color"], act,
                          header["mode"], net)
    return field, header["step"], header["config"]
