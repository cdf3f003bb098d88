"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"UNIDIFF\\n"
    u32       format version
    u32       header length H
    H bytes   header, canonical JSON (sorted keys, no spaces)
    ...       tensor payload, concatenated C-order buffers
    u32       CRC-32 of every preceding byte

The header lists each tensor's name, dtype, shape and byte offset into the
payload, together with arbitrary JSON metadata (config hash, layout, step,
rng state, ...). Serialization is canonical, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, HashMismatchError, TruncatedFileError, VersionMismatchError

MAGIC = b"UNIDIFF\n"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = canonical_json({"meta": meta, "tensors": index, "payload_bytes": offset}).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes, expect_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if len(raw) < _PREFIX.size:
        raise TruncatedFileError("checkpoint shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format v{version}, this build reads v{VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise TruncatedFileError("checkpoint ends inside its header")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    end = start + header["payload_bytes"]
    if len(raw) != end + 4:
        raise TruncatedFileError(f"checkpoint has {len(raw)} bytes, header implies {end + 4}")
    (crc,) = struct.unpack_from("<I", raw, end)
    if crc != zlib.crc32(raw[:end]):
        raise CheckpointError("checkpoint checksum mismatch (corrupted bytes)")
    meta = header["meta"]
    if expect_hash is not None and meta.get("config_hash") != expect_hash:
        raise HashMismatchError(f"checkpoint config hash {meta.get('config_hash')} != expected {expect_hash}")
    tensors = {}
    for ent in header["tensors"]:
        lo = start + ent["offset"]
        buf = raw[lo:lo + ent["nbytes"]]
        tensors[ent["name"]] = np.frombuffer(buf, dtype=np.dtype("<" + ent["dtype"]) if ent["dtype"][0] in "fiuc"
                                             else ent["dtype"]).reshape(ent["shape"]).copy()
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(raw, expect_hash)
