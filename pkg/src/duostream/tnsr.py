"""TNSR container: a flat, little-endian, name -> float32 array archive.

Layout::

    b"TNSR1\\0"
    repeated until EOF:
        u16 name length, UTF-8 name,
        u8 dtype code (0 = float32), u8 ndim, ndim x u32 extents,
        row-major payload
"""
import struct

import numpy as np

MAGIC = b"TNSR1\0"
DTYPES = {0: np.dtype("<f4")}
CODES = {np.dtype("<f4"): 0}


class TnsrError(ValueError):
    pass


def dumps(arrays):
    chunks = [MAGIC]
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise TnsrError(f"name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise TnsrError(f"{name}: too many dimensions")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(buf):
    if not buf.startswith(MAGIC):
        raise TnsrError("bad magic")
    pos = len(MAGIC)
    out = {}
    while pos < len(buf):
        try:
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
        except struct.error as exc:
            raise TnsrError(f"truncated header at byte {pos}") from exc
        if code not in DTYPES:
            raise TnsrError(f"{name}: unknown dtype code {code}")
        dtype = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise TnsrError(f"{name}: truncated payload")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return out


def save(path, arrays):
    with open(path, "wb") as f:
        f.write(dumps(arrays))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
