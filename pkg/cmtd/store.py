# Copyright (c) 2018 David Preece, All rights reserved.
#
# Permission to use, copy, modify, and/or distribute this software for any
# purpose with or without fee is hereby granted.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES
# WITH REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF
# MERCHANTABILITY AND FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR
# ANY SPECIAL, DIRECT, INDIRECT, OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES
# WHATSOEVER RESULTING FROM LOSS OF USE, DATA OR PROFITS, WHETHER IN AN
# ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS ACTION, ARISING OUT OF
# OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS SOFTWARE.

import json
import logging
import os
import struct
import tempfile
import numpy as np
from collections import OrderedDict
from typing import Tuple, Dict
from . import FormatError

WEIGHTS_MAGIC = b'CMTD'
BATCH_MAGIC = b'CMTB'
FORMAT_VERSION = 1

# header: magic, u16 version, u32 manifest length, manifest (utf-8 json)
# record: u16 name length, name, u8 rank, u32 extent * rank, little-endian f64 payload
_HEADER = struct.Struct('<4sHI')
_NAME_LENGTH = struct.Struct('<H')
_RANK = struct.Struct('<B')
_EXTENT = struct.Struct('<I')


def encode_container(magic: bytes, manifest: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    """Render a manifest and named arrays into the container format.

    :param magic: WEIGHTS_MAGIC or BATCH_MAGIC.
    :param manifest: Anything json can serialise.
    :param arrays: name -> array, written in iteration order.
    :return: The file contents."""
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()
    parts = [_HEADER.pack(magic, FORMAT_VERSION, len(manifest_bytes)), manifest_bytes]
    for name, values in arrays.items():
        encoded_name = name.encode()
        values = np.asarray(values, dtype='<f8')
        if len(encoded_name) > 0xffff:
            raise ValueError("Array name too long for the container: " + name[:32])
        if values.ndim > 0xff:
            raise ValueError("Array rank too high for the container: " + name)
        parts.append(_NAME_LENGTH.pack(len(encoded_name)))
        parts.append(encoded_name)
        parts.append(_RANK.pack(values.ndim))
        parts.extend(_EXTENT.pack(extent) for extent in values.shape)
        parts.append(np.ascontiguousarray(values).tobytes())
    return b''.join(parts)


def decode_container(data: bytes, magic: bytes, path: str='<memory>') -> Tuple[dict, 'OrderedDict[str, np.ndarray]']:
    """Parse the container format.

    :param data: The file contents.
    :param magic: The magic we expect to find.
    :param path: Only used for error messages.
    :return: (manifest, name -> array)."""
    if len(data) < _HEADER.size:
        raise FormatError(path, len(data), "Truncated header")
    found_magic, version, manifest_length = _HEADER.unpack_from(data, 0)
    if found_magic != magic:
        raise FormatError(path, 0, "Bad magic %r (wanted %r)" % (found_magic, magic))
    if version != FORMAT_VERSION:
        raise FormatError(path, 4, "Unsupported format version %d" % version)
    offset = _HEADER.size
    if offset + manifest_length > len(data):
        raise FormatError(path, len(data), "Truncated manifest")
    try:
        manifest = json.loads(data[offset:offset + manifest_length].decode())
    except (UnicodeDecodeError, ValueError):
        raise FormatError(path, offset, "Manifest is not utf-8 json")
    offset += manifest_length

    arrays = OrderedDict()
    while offset < len(data):
        record_start = offset
        offset = _need(data, offset, _NAME_LENGTH.size, path)
        name_length, = _NAME_LENGTH.unpack_from(data, record_start)
        name_start = offset
        offset = _need(data, offset, name_length, path)
        try:
            name = data[name_start:offset].decode()
        except UnicodeDecodeError:
            raise FormatError(path, name_start, "Record name is not utf-8")
        if name in arrays:
            raise FormatError(path, record_start, "Duplicate record '%s'" % name)
        rank_start = offset
        offset = _need(data, offset, _RANK.size, path)
        rank, = _RANK.unpack_from(data, rank_start)
        extents = []
        for _ in range(rank):
            extent_start = offset
            offset = _need(data, offset, _EXTENT.size, path)
            extents.append(_EXTENT.unpack_from(data, extent_start)[0])
        count = int(np.prod(extents, dtype=np.int64)) if rank > 0 else 1
        payload_start = offset
        offset = _need(data, offset, 8 * count, path)
        values = np.frombuffer(data, dtype='<f8', count=count, offset=payload_start)
        arrays[name] = values.astype(np.float64).reshape(extents)
    return manifest, arrays


def write_container(path: str, magic: bytes, manifest: dict, arrays: Dict[str, np.ndarray]):
    """Atomically write a container to disk (temp file + rename)."""
    atomic_write(path, encode_container(magic, manifest, arrays))
    logging.debug("Wrote container (%d arrays): %s" % (len(arrays), path))


def read_container(path: str, magic: bytes) -> Tuple[dict, 'OrderedDict[str, np.ndarray]']:
    with open(path, 'rb') as f:
        data = f.read()
    return decode_container(data, magic, path)


def atomic_write(path: str, data: bytes):
    """Write bytes to a temp file in the destination directory, then rename over the destination."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path) + '.')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _need(data: bytes, offset: int, length: int, path: str) -> int:
    # returns the new offset or raises where the data ran out
    if offset + length > len(data):
        raise FormatError(path, len(data), "Truncated record")
    return offset + length
