"""Binary orbit-cache files.

Layout (all integers little-endian)::

    b"AORB1"
    u32 header length, header (canonical JSON), u32 crc32 of the header
    rows: fixed-width records (mu as f8[d], parent i4, length i2, guard u1,
          word bit-packed at 5 bits per letter, letter code + 1, 0 = pad)
    u32 crc32 of the row bytes
    column blocks until end of file, each:
        b"BLK1", u32 tag length, tag (canonical JSON), u32 dtype length,
        dtype string, u32 ndim, u64 shape[ndim], u64 data length, data,
        u32 crc32 of everything in the block after the marker

The header records d, m, maxlen, dedup policy, build seed, row count and
the generator hash.  Files are written deterministically, so equal tables
give byte-identical files.
"""

import hashlib
import json
import os
import struct
import zlib

import numpy as np

from .enumeration import OrbitTable
from .errors import CacheCorrupted

MAGIC = b"AORB1"
BLOCK_MAGIC = b"BLK1"
BITS_PER_LETTER = 5
CHUNK_ROWS = 1 << 20
HEADER_KEYS = ("d", "m", "maxlen", "policy", "seed", "rows", "generator_hash")


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def row_dtype(d, maxlen):
    nbytes = (BITS_PER_LETTER * maxlen + 7) // 8
    return np.dtype(
        [("mu", "<f8", (d,)), ("parent", "<i4"), ("length", "<i2"), ("guard", "u1"), ("word", "u1", (nbytes,))]
    )


def pack_words(words):
    """(n, L) letter codes padded with -1 -> (n, ceil(5L/8)) packed bytes."""
    w = (np.asarray(words, dtype=np.int16) + 1).astype(np.uint8)
    if np.any(w >= 1 << BITS_PER_LETTER):
        raise ValueError("letter codes must be below 31 for 5-bit packing")
    bits = np.unpackbits(w[:, :, None], axis=2)[:, :, 8 - BITS_PER_LETTER :]
    return np.packbits(bits.reshape(w.shape[0], -1), axis=1)


def unpack_words(packed, maxlen):
    bits = np.unpackbits(packed, axis=1)[:, : BITS_PER_LETTER * maxlen]
    bits = bits.reshape(packed.shape[0], maxlen, BITS_PER_LETTER)
    weights = 1 << np.arange(BITS_PER_LETTER - 1, -1, -1)
    codes = (bits * weights).sum(axis=2).astype(np.int16) - 1
    return codes.astype(np.int8)


def header_of(table):
    meta = table.meta
    header = {key: meta[key] for key in HEADER_KEYS}
    header["name"] = meta.get("name", "")
    header["format"] = 1
    return header


def _rows_bytes(table):
    d, maxlen = table.d, max(table.maxlen, 1)
    dt = row_dtype(d, maxlen)
    n = len(table)
    for start in range(0, n, CHUNK_ROWS):
        stop = min(n, start + CHUNK_ROWS)
        rec = np.zeros(stop - start, dtype=dt)
        rec["mu"] = table.mu[start:stop]
        rec["parent"] = table.parent[start:stop]
        rec["length"] = table.length[start:stop]
        rec["guard"] = table.guarded[start:stop]
        rec["word"] = pack_words(table.words(np.arange(start, stop)))
        yield rec.tobytes()


def _block_bytes(tag, array):
    arr = np.ascontiguousarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dtype, copy=False)
    tag_b = _canonical(tag)
    dt_b = dtype.str.encode()
    body = b"".join(
        [
            struct.pack("<I", len(tag_b)),
            tag_b,
            struct.pack("<I", len(dt_b)),
            dt_b,
            struct.pack("<I", arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            struct.pack("<Q", arr.nbytes),
            arr.tobytes(),
        ]
    )
    return BLOCK_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def write_cache(path, table, blocks=()):
    """Write ``table`` (and optional ``(tag, array)`` column blocks) to ``path``."""
    header = _canonical(header_of(table))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", zlib.crc32(header)))
        crc = 0
        for chunk in _rows_bytes(table):
            crc = zlib.crc32(chunk, crc)
            fh.write(chunk)
        fh.write(struct.pack("<I", crc))
        for tag, arr in blocks:
            fh.write(_block_bytes(tag, arr))
    os.replace(tmp, path)
    return path


def append_block(path, tag, array):
    """Append one tagged, checksummed column block to an existing cache."""
    with open(path, "ab") as fh:
        fh.write(_block_bytes(tag, array))


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CacheCorrupted(f"truncated {what}")
    return data


def read_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh):
    if fh.read(len(MAGIC)) != MAGIC:
        raise CacheCorrupted("bad magic; not an orbit cache")
    (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    if hlen > 1 << 20:
        raise CacheCorrupted("implausible header length")
    raw = _read_exact(fh, hlen, "header")
    (crc,) = struct.unpack("<I", _read_exact(fh, 4, "header checksum"))
    if zlib.crc32(raw) != crc:
        raise CacheCorrupted("header checksum mismatch")
    try:
        return json.loads(raw)
    except ValueError as exc:
        raise CacheCorrupted("header is not valid JSON") from exc


def load_cache(path):
    """Read and verify a cache; returns ``(table, blocks)``.

    ``blocks`` is a list of ``(tag, array)``.  Any checksum mismatch raises
    CacheCorrupted.
    """
    with open(path, "rb") as fh:
        header = _read_header(fh)
        d, maxlen, n = int(header["d"]), int(header["maxlen"]), int(header["rows"])
        dt = row_dtype(d, max(maxlen, 1))
        raw = _read_exact(fh, dt.itemsize * n, "rows")
        (crc,) = struct.unpack("<I", _read_exact(fh, 4, "row checksum"))
        if zlib.crc32(raw) != crc:
            raise CacheCorrupted("row checksum mismatch")
        rec = np.frombuffer(raw, dtype=dt)
        blocks = []
        while True:
            marker = fh.read(len(BLOCK_MAGIC))
            if not marker:
                break
            if marker != BLOCK_MAGIC:
                raise CacheCorrupted("bad column block marker")
            blocks.append(_read_block(fh))
    words = np.empty((n, max(maxlen, 1)), dtype=np.int8)
    for start in range(0, n, CHUNK_ROWS):
        words[start : start + CHUNK_ROWS] = unpack_words(rec["word"][start : start + CHUNK_ROWS], max(maxlen, 1))
    length = rec["length"].astype(np.int16)
    last = np.full(n, -1, dtype=np.int8)
    nz = np.flatnonzero(length > 0)
    last[nz] = words[nz, length[nz] - 1]
    meta = {key: header[key] for key in HEADER_KEYS}
    meta["name"] = header.get("name", "")
    table = OrbitTable(
        meta,
        length,
        rec["parent"].astype(np.int32),
        last,
        rec["mu"].astype(np.float64),
        rec["guard"].astype(bool),
    )
    return table, blocks


def _read_block(fh):
    parts = []

    def take(n, what):
        data = _read_exact(fh, n, what)
        parts.append(data)
        return data

    (tlen,) = struct.unpack("<I", take(4, "block tag length"))
    tag = json.loads(take(tlen, "block tag"))
    (dlen,) = struct.unpack("<I", take(4, "block dtype length"))
    dtype = np.dtype(take(dlen, "block dtype").decode())
    (ndim,) = struct.unpack("<I", take(4, "block ndim"))
    shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "block shape"))
    (nbytes,) = struct.unpack("<Q", take(8, "block size"))
    data = take(nbytes, "block data")
    (crc,) = struct.unpack("<I", _read_exact(fh, 4, "block checksum"))
    if zlib.crc32(b"".join(parts)) != crc:
        raise CacheCorrupted(f"checksum mismatch in column block {tag}")
    return tag, np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def file_hash(path):
    """SHA-256 of the cache file, the identity embedded in every report."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 22), b""):
            h.update(chunk)
    return h.hexdigest()
