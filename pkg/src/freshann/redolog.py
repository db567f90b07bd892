"""Append-only redo log with CRC-framed records and torn-tail recovery.

File layout: 4-byte magic "FLOG", then records of
    [u32 LE length | u8 opcode | u64 LE id | payload | u32 LE CRC32]
where length covers opcode+id+payload and the CRC covers every preceding
byte of the record (length field included). Insert payloads are the raw
dim x float32 vector; deletes have no payload.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .core import FileFormatError

MAGIC = b"FLOG"
OP_INSERT = 1
OP_DELETE = 2


@dataclass
class LogRecord:
    opcode: int
    node_id: int
    vector: np.ndarray | None
    offset_after: int  # byte offset just past this record


class RedoLog:
    """Durable operation log. Appends buffer in the OS file object until
    flush(), which also fsyncs; flushed_offset tracks the durable prefix."""

    def __init__(self, path, create: bool = False):
        self.path = str(path)
        if create or not os.path.exists(self.path):
            with open(self.path, "wb") as f:
                f.write(MAGIC)
        valid = scan_valid_prefix(self.path)
        # drop any torn tail before appending
        if os.path.getsize(self.path) != valid:
            with open(self.path, "rb+") as f:
                f.truncate(valid)
        self._f = open(self.path, "ab")
        self.offset = valid
        self.flushed_offset = valid

    def append_insert(self, node_id: int, vector: np.ndarray) -> int:
        payload = np.ascontiguousarray(vector, dtype=np.float32).tobytes()
        return self._append(OP_INSERT, node_id, payload)

    def append_delete(self, node_id: int) -> int:
        return self._append(OP_DELETE, node_id, b"")

    def _append(self, opcode, node_id, payload) -> int:
        body = struct.pack("<IBQ", 1 + 8 + len(payload), opcode, node_id) + payload
        rec = body + struct.pack("<I", zlib.crc32(body))
        self._f.write(rec)
        self.offset += len(rec)
        return self.offset

    def flush(self) -> int:
        self._f.flush()
        os.fsync(self._f.fileno())
        self.flushed_offset = self.offset
        return self.flushed_offset

    def close(self):
        self.flush()
        self._f.close()


def scan_valid_prefix(path) -> int:
    """Byte length of the longest valid record prefix (magic included)."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FileFormatError(f"{path}: bad log magic")
        offset = 4
        while offset + 4 <= size:
            head = f.read(4)
            (length,) = struct.unpack("<I", head)
            if offset + 4 + length + 4 > size or length < 9:
                break
            body = f.read(length)
            (crc,) = struct.unpack("<I", f.read(4))
            if zlib.crc32(head + body) != crc:
                break
            offset += 4 + length + 4
    return offset


def replay(path, dim: int, from_offset: int = 4):
    """Yield LogRecord for every valid record past from_offset, stopping at
    the first torn or corrupt record."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FileFormatError(f"{path}: bad log magic")
        f.seek(from_offset)
        offset = from_offset
        while offset + 4 <= size:
            head = f.read(4)
            (length,) = struct.unpack("<I", head)
            if offset + 4 + length + 4 > size or length < 9:
                return
            body = f.read(length)
            (crc,) = struct.unpack("<I", f.read(4))
            if zlib.crc32(head + body) != crc:
                return
            opcode, node_id = struct.unpack("<BQ", body[:9])
            payload = body[9:]
            vector = None
            if opcode == OP_INSERT:
                if len(payload) != 4 * dim:
                    return
                vector = np.frombuffer(payload, dtype=np.float32).copy()
            elif opcode != OP_DELETE:
                return
            offset += 4 + length + 4
            yield LogRecord(opcode, node_id, vector, offset)
