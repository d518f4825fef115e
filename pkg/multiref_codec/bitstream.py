"""
The ``.mlv2`` container.

Layout (all integers big-endian)::

    magic        4 bytes  b"MLv2"
    version      u8       1
    orig_h       u16
    orig_w       u16
    model_id     u8
    lambda_index u8
    num_slices   u8
    flags        u8       bit0 selective compression, bit1 refined latents,
                          bit2 bucketed probability tables
    z payload    u32 length + bytes
    per slice    u32 length + anchor bytes, u32 length + non-anchor bytes
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

from .errors import FormatError, ParseError

MAGIC = b"MLv2"
VERSION = 1

FLAG_SKIP = 1 << 0
FLAG_REFINED = 1 << 1
FLAG_BUCKETED = 1 << 2

_HEADER = struct.Struct(">4sBHHBBBB")
_LENGTH = struct.Struct(">I")


@dataclass(frozen=True)
class BitstreamHeader:
    orig_h: int
    orig_w: int
    model_id: int
    lambda_index: int
    num_slices: int
    flags: int = 0

    def __post_init__(self):
        limits = {
            "orig_h": 0xFFFF,
            "orig_w": 0xFFFF,
            "model_id": 0xFF,
            "lambda_index": 0xFF,
            "num_slices": 0xFF,
            "flags": 0xFF,
        }
        for name, limit in limits.items():
            value = getattr(self, name)
            if not 0 <= value <= limit:
                raise FormatError(f"header field {name}={value} out of range [0, {limit}]")

    @property
    def skip(self) -> bool:
        return bool(self.flags & FLAG_SKIP)

    @property
    def refined(self) -> bool:
        return bool(self.flags & FLAG_REFINED)

    @property
    def bucketed(self) -> bool:
        return bool(self.flags & FLAG_BUCKETED)

    def serialize(self) -> bytes:
        return _HEADER.pack(
            MAGIC,
            VERSION,
            self.orig_h,
            self.orig_w,
            self.model_id,
            self.lambda_index,
            self.num_slices,
            self.flags,
        )

    @classmethod
    def parse(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < _HEADER.size:
            if data[: len(MAGIC)] != MAGIC[: len(data)]:
                raise FormatError("not an .mlv2 bitstream (bad magic)")
            raise ParseError(f"truncated header: {len(data)} of {_HEADER.size} bytes")
        magic, version, orig_h, orig_w, model_id, lambda_index, num_slices, flags = (
            _HEADER.unpack_from(data)
        )
        if magic != MAGIC:
            raise FormatError(f"not an .mlv2 bitstream (magic {magic!r})")
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}, expected {VERSION}")
        return cls(orig_h, orig_w, model_id, lambda_index, num_slices, flags)


@dataclass
class Bitstream:
    """Header plus the side-information payload and two payloads per slice."""
    header: BitstreamHeader
    z_payload: bytes = b""
    slice_payloads: List[Tuple[bytes, bytes]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.slice_payloads) != self.header.num_slices:
            raise FormatError(
                f"{len(self.slice_payloads)} slice payloads for "
                f"{self.header.num_slices} slices"
            )

    @property
    def payload_bytes(self) -> int:
        """Bytes of entropy-coded data, without header and length prefixes."""
        return len(self.z_payload) + sum(len(a) + len(n) for a, n in self.slice_payloads)

    def serialize(self) -> bytes:
        parts = [self.header.serialize(), _LENGTH.pack(len(self.z_payload)), self.z_payload]
        for anchor, non_anchor in self.slice_payloads:
            parts += [_LENGTH.pack(len(anchor)), anchor, _LENGTH.pack(len(non_anchor)), non_anchor]
        return b"".join(parts)

    def __len__(self) -> int:
        return len(self.serialize())

    @classmethod
    def parse(cls, data: bytes) -> "Bitstream":
        """
        Raises
        ------
        FormatError
            On a wrong magic or version
        ParseError
            On truncated payloads or trailing bytes
        """
        header = BitstreamHeader.parse(data)
        offset = _HEADER.size

        def read_payload() -> bytes:
            nonlocal offset
            if offset + _LENGTH.size > len(data):
                raise ParseError(f"truncated length prefix at byte {offset}")
            (length,) = _LENGTH.unpack_from(data, offset)
            offset += _LENGTH.size
            if offset + length > len(data):
                raise ParseError(
                    f"truncated payload at byte {offset}: need {length}, "
                    f"have {len(data) - offset}"
                )
            payload = bytes(data[offset: offset + length])
            offset += length
            return payload

        z_payload = read_payload()
        slices = [(read_payload(), read_payload()) for _ in range(header.num_slices)]
        if offset != len(data):
            raise ParseError(f"{len(data) - offset} trailing bytes after the last payload")
        return cls(header, z_payload, slices)

    def save(self, path: Union[str, Path]) -> int:
        data = self.serialize()
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Bitstream":
        return cls.parse(Path(path).read_bytes())
