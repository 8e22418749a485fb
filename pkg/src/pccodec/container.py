"""Framed bitstream container: header, weight segment, geometry segment.

Layout (all integers little-endian, varints are LEB128):

    magic  b"OPC1"
    u8     version (1)
    u8     depth
    u8     flags        bit0 lossless, bit1 weight segment present,
                        bit2 adaptation fell back to pretrained heads
    u8     coarse_cutoff  (first scale reconstructed by count, == depth if lossless)
    u64    model_id
    varint point count k per scale in [coarse_cutoff, depth)   (depth - cutoff entries)
    varint weight segment length, then its bytes
    varint geometry segment length, then its bytes
           (geometry segment = per coded stream: varint length + bytes)
    u32    check value (crc32 of all coded nibble symbols)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import ParseError

MAGIC = b"OPC1"
VERSION = 1

FLAG_LOSSLESS = 1
FLAG_WEIGHTS = 2
FLAG_FALLBACK = 4


def write_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def read_varint(data: bytes, pos: int):
    shift = 0
    value = 0
    while True:
        if pos >= len(data):
            raise ParseError("varint runs past end of buffer")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ParseError("varint too long")


@dataclass
class BitstreamContainer:
    depth: int
    coarse_cutoff: int  # first scale reconstructed from a transmitted count
    model_id: int
    point_counts: list  # k per scale in [coarse_cutoff, depth)
    weight_segment: bytes
    geometry_streams: list  # list of bytes, canonical stage order
    check: int
    fallback: bool = False
    encoder_stats: object = None  # encoder-side bookkeeping, never serialized

    @property
    def lossless(self) -> bool:
        return self.coarse_cutoff == self.depth

    def geometry_segment(self) -> bytes:
        seg = bytearray()
        for stream in self.geometry_streams:
            seg += write_varint(len(stream))
            seg += stream
        return bytes(seg)

    def to_bytes(self) -> bytes:
        flags = 0
        if self.lossless:
            flags |= FLAG_LOSSLESS
        if self.weight_segment:
            flags |= FLAG_WEIGHTS
        if self.fallback:
            flags |= FLAG_FALLBACK
        out = bytearray(MAGIC)
        out += struct.pack("<BBBB", VERSION, self.depth, flags, self.coarse_cutoff)
        out += struct.pack("<Q", self.model_id)
        for k in self.point_counts:
            out += write_varint(k)
        out += write_varint(len(self.weight_segment))
        out += self.weight_segment
        geom = self.geometry_segment()
        out += write_varint(len(geom))
        out += geom
        out += struct.pack("<I", self.check & 0xFFFFFFFF)
        return bytes(out)

    @staticmethod
    def from_bytes(data: bytes) -> "BitstreamContainer":
        if len(data) < 16 or data[:4] != MAGIC:
            raise ParseError("bad magic")
        version, depth, flags, cutoff = struct.unpack("<BBBB", data[4:8])
        if version != VERSION:
            raise ParseError(f"unsupported container version {version}")
        if cutoff > depth:
            raise ParseError("cutoff scale beyond depth")
        (model_id,) = struct.unpack("<Q", data[8:16])
        pos = 16
        counts = []
        for _ in range(depth - cutoff):
            k, pos = read_varint(data, pos)
            counts.append(k)
        wlen, pos = read_varint(data, pos)
        if pos + wlen > len(data):
            raise ParseError("weight segment runs past end")
        weights = data[pos : pos + wlen]
        pos += wlen
        glen, pos = read_varint(data, pos)
        if pos + glen > len(data):
            raise ParseError("geometry segment runs past end")
        geom = data[pos : pos + glen]
        pos += glen
        if pos + 4 > len(data):
            raise ParseError("missing check value")
        (check,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        if pos != len(data):
            raise ParseError("trailing bytes after container")
        if bool(flags & FLAG_LOSSLESS) != (cutoff == depth):
            raise ParseError("lossless flag inconsistent with cutoff scale")
        streams = []
        gpos = 0
        while gpos < len(geom):
            slen, gpos = read_varint(geom, gpos)
            if gpos + slen > len(geom):
                raise ParseError("stream runs past geometry segment")
            streams.append(geom[gpos : gpos + slen])
            gpos += slen
        return BitstreamContainer(
            depth=depth,
            coarse_cutoff=cutoff,
            model_id=model_id,
            point_counts=counts,
            weight_segment=weights,
            geometry_streams=streams,
            check=check,
            fallback=bool(flags & FLAG_FALLBACK),
        )


def rate_split(container: BitstreamContainer):
    """(weight bits, geometry bits) as framed in the container."""
    return 8 * len(container.weight_segment), 8 * len(container.geometry_segment())


def header_bits(container: BitstreamContainer) -> int:
    total = 8 * len(container.to_bytes())
    w, g = rate_split(container)
    return total - w - g
