"""Binary parameter checkpoints with a JSON sidecar manifest.

Layout (little-endian): the 8-byte magic ``PROBTTE1``; six int64 header
fields ``version, p, r_L, r_H, n_links, flags``; the float64 scale; then
for every bucket ``L``, ``H``, ``w_mu``, ``w_d`` (row-major float64) and,
when ``flags & 1``, the diagonal override. The manifest ``<path>.json``
records shapes and the SHA-256 of the binary file.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ValidationError
from .model import ModelParams

MAGIC = b"PROBTTE1"
VERSION = 1
_HEADER = struct.Struct("<6qd")
_F8 = np.dtype("<f8")


def encode(params: ModelParams) -> bytes:
    flags = 1 if params.diag_override is not None else 0
    parts = [MAGIC, _HEADER.pack(VERSION, params.p, params.r_L, params.r_H,
                                 params.n_links, flags, params.scale)]
    for t in range(params.p):
        arrays = [params.L[t], params.H[t], params.w_mu[t], params.w_d[t]]
        if flags & 1:
            arrays.append(params.diag_override[t])
        parts.extend(np.ascontiguousarray(a, dtype=_F8).tobytes() for a in arrays)
    return b"".join(parts)


def decode(blob: bytes) -> ModelParams:
    if blob[:8] != MAGIC:
        raise ValidationError("not a PROBTTE1 checkpoint")
    version, p, r_l, r_h, n, flags, scale = _HEADER.unpack_from(blob, 8)
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    per_bucket = n * r_l + n * r_h + r_l + r_h + (n if flags & 1 else 0)
    body = np.frombuffer(blob, dtype=_F8, offset=8 + _HEADER.size)
    if body.size != p * per_bucket:
        raise ValidationError("checkpoint payload size does not match its header")
    body = body.reshape(p, per_bucket)
    cuts = np.cumsum([n * r_l, n * r_h, r_l, r_h])
    L = body[:, :cuts[0]].reshape(p, n, r_l)
    H = body[:, cuts[0]:cuts[1]].reshape(p, n, r_h)
    w_mu = body[:, cuts[1]:cuts[2]]
    w_d = body[:, cuts[2]:cuts[3]]
    override = body[:, cuts[3]:].copy() if flags & 1 else None
    return ModelParams(L.copy(), H.copy(), w_mu.copy(), w_d.copy(), override, scale)


def save_checkpoint(params: ModelParams, path: str, **manifest_extra) -> dict:
    blob = encode(params)
    with open(path, "wb") as fh:
        fh.write(blob)
    manifest = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "p": params.p,
        "r_L": params.r_L,
        "r_H": params.r_H,
        "n_links": params.n_links,
        "scale": params.scale,
        "has_diag_override": params.diag_override is not None,
        "shapes": {
            "L": list(params.L.shape),
            "H": list(params.H.shape),
            "w_mu": list(params.w_mu.shape),
            "w_d": list(params.w_d.shape),
        },
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest.update(manifest_extra)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(path: str, verify: bool = True) -> tuple:
    """Return ``(params, manifest)``; the manifest is ``{}`` when absent."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest = {}
    try:
        with open(path + ".json", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        pass
    if verify and manifest.get("sha256") and manifest["sha256"] != hashlib.sha256(blob).hexdigest():
        raise ValidationError(f"checkpoint {path} does not match its manifest hash")
    return decode(blob), manifest
