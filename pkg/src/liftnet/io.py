"""Checkpoints, PGM images and metrics CSV files.

A checkpoint starts with the line ``LIFTNET-CHECKPOINT``, then a line with
the byte length of a JSON manifest, the manifest itself, and finally the
parameter arrays as raw little-endian float64 blobs.  The manifest records
the format version, the builder name and configuration, the learnable set,
the network dtype and, per block, its name, shape, byte offset (relative to
the start of the blob section), byte count and CRC-32.
"""

from __future__ import annotations

import json
import math
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .architectures import BlockNetwork, network_from_params

MAGIC = b"LIFTNET-CHECKPOINT\n"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def checkpoint_bytes(net: BlockNetwork) -> bytes:
    blocks, blobs, offset = [], [], 0
    for name in sorted(net.params):
        arr = np.asarray(net.params[name])
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                       "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": VERSION,
        "builder": net.builder,
        "config": _jsonable(net.config),
        "learnable": sorted(net.learnable),
        "dtype": np.dtype(net.dtype).name,
        "endianness": "little",
        "blob_dtype": "float64",
        "blocks": blocks,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode()
    return MAGIC + f"{len(text)}\n".encode() + text + b"".join(blobs)


def save_checkpoint(path, net: BlockNetwork):
    Path(path).write_bytes(checkpoint_bytes(net))


def read_manifest(data: bytes) -> tuple[dict, int]:
    """Manifest and the byte position where the blobs start."""
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic line)")
    pos = len(MAGIC)
    end = data.find(b"\n", pos)
    if end < 0:
        raise CheckpointError("truncated manifest length line")
    try:
        n = int(data[pos:end])
    except ValueError as exc:
        raise CheckpointError("bad manifest length line") from exc
    start = end + 1
    if len(data) < start + n:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if manifest.get("endianness") != "little" or manifest.get("blob_dtype") != "float64":
        raise CheckpointError("unsupported blob encoding")
    return manifest, start + n


def load_checkpoint(path) -> BlockNetwork:
    """Rebuild the network; forward outputs match the saved network bit for bit."""
    data = Path(path).read_bytes()
    manifest, base = read_manifest(data)
    params = {}
    expected = 0
    for block in manifest["blocks"]:
        shape = tuple(block["shape"])
        nbytes = 8 * math.prod(shape)
        if block["nbytes"] != nbytes or block["offset"] != expected:
            raise CheckpointError(f"block {block['name']!r}: declared size or offset is inconsistent")
        lo = base + block["offset"]
        raw = data[lo:lo + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"block {block['name']!r} is truncated")
        if zlib.crc32(raw) != block["crc32"]:
            raise CheckpointError(f"block {block['name']!r} fails its checksum")
        params[block["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(manifest["dtype"])
        expected += nbytes
    if len(data) != base + expected:
        raise CheckpointError("trailing bytes after the last block")
    return network_from_params(manifest["builder"], params, manifest["config"], manifest["learnable"])


# Images


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """Clip to ``[0, 1]`` and scale to 0..255."""
    return np.round(np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM (P5) of a 2-D image with values in ``[0, 1]``."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image_to_bytes(img).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file written by :func:`write_pgm`; values returned in ``[0, 1]``."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError("only 8-bit P5 files are supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w) / 255.0


# CSV


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns: Iterable[str], rows: Iterable[Mapping]):
    """Fixed column order, '.' decimals, '\\n' line endings, floats at full precision."""
    columns = list(columns)
    lines = [",".join(columns)]
    lines += [",".join(_cell(row[c]) for c in columns) for row in rows]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        header, *body = fh.read().splitlines()
    cols = header.split(",")
    return [dict(zip(cols, line.split(","))) for line in body]
