"""Tests for the .mlv2 container format."""

import pytest


def _bitstream(flags=0):
    from multiref_codec.bitstream import Bitstream, BitstreamHeader

    header = BitstreamHeader(orig_h=40, orig_w=50, model_id=7, lambda_index=3, num_slices=2,
                             flags=flags)
    return Bitstream(header, b"\x01\x02", [(b"abc", b""), (b"", b"\xff" * 4)])


class TestHeader:
    """Test the fixed-size header."""

    def test_round_trip(self):
        """Parsing a serialized header gives it back."""
        from multiref_codec.bitstream import FLAG_REFINED, FLAG_SKIP, BitstreamHeader

        header = BitstreamHeader(1080, 1920, 255, 5, 10, FLAG_SKIP | FLAG_REFINED)
        parsed = BitstreamHeader.parse(header.serialize())
        assert parsed == header
        assert parsed.skip and parsed.refined and not parsed.bucketed

    def test_starts_with_magic(self):
        """Serialized headers start with the magic and version."""
        from multiref_codec.bitstream import MAGIC, VERSION, BitstreamHeader

        data = BitstreamHeader(64, 64, 1, 0, 2).serialize()
        assert data[:4] == MAGIC
        assert data[4] == VERSION
        assert len(data) == 13

    def test_field_out_of_range(self):
        """Fields must fit their on-disk width."""
        from multiref_codec.bitstream import BitstreamHeader
        from multiref_codec.errors import FormatError

        with pytest.raises(FormatError, match="orig_h"):
            BitstreamHeader(70000, 64, 1, 0, 2)

    def test_bad_magic(self):
        """Foreign files are rejected as format errors."""
        from multiref_codec.bitstream import BitstreamHeader
        from multiref_codec.errors import FormatError, ParseError

        data = b"PNG!" + BitstreamHeader(64, 64, 1, 0, 2).serialize()[4:]
        with pytest.raises(FormatError) as excinfo:
            BitstreamHeader.parse(data)
        assert not isinstance(excinfo.value, ParseError)

    def test_bad_version(self):
        """Unknown versions are rejected."""
        from multiref_codec.bitstream import BitstreamHeader
        from multiref_codec.errors import FormatError

        data = bytearray(BitstreamHeader(64, 64, 1, 0, 2).serialize())
        data[4] = 99
        with pytest.raises(FormatError, match="version"):
            BitstreamHeader.parse(bytes(data))

    def test_truncated_header(self):
        """A header cut short is a parse error."""
        from multiref_codec.bitstream import BitstreamHeader
        from multiref_codec.errors import ParseError

        with pytest.raises(ParseError):
            BitstreamHeader.parse(BitstreamHeader(64, 64, 1, 0, 2).serialize()[:8])


class TestBitstream:
    """Test the full container."""

    def test_round_trip(self):
        """Serialize then parse gives identical payloads."""
        from multiref_codec.bitstream import Bitstream

        stream = _bitstream()
        parsed = Bitstream.parse(stream.serialize())
        assert parsed == stream
        assert len(parsed) == len(stream.serialize())
        assert stream.payload_bytes == 2 + 3 + 4

    def test_save_load(self, tmp_path):
        """Files written with save load back unchanged."""
        from multiref_codec.bitstream import Bitstream

        stream = _bitstream()
        path = tmp_path / "image.mlv2"
        assert stream.save(path) == path.stat().st_size
        assert Bitstream.load(path) == stream

    def test_truncated_payload(self):
        """Missing payload bytes raise ParseError."""
        from multiref_codec.bitstream import Bitstream
        from multiref_codec.errors import ParseError

        data = _bitstream().serialize()
        with pytest.raises(ParseError, match="truncated"):
            Bitstream.parse(data[:-1])

    def test_trailing_bytes(self):
        """Extra bytes after the last payload raise ParseError."""
        from multiref_codec.bitstream import Bitstream
        from multiref_codec.errors import ParseError

        with pytest.raises(ParseError, match="trailing"):
            Bitstream.parse(_bitstream().serialize() + b"\x00")

    def test_slice_count_mismatch(self):
        """The header's slice count must match the payloads."""
        from multiref_codec.bitstream import Bitstream, BitstreamHeader
        from multiref_codec.errors import FormatError

        with pytest.raises(FormatError):
            Bitstream(BitstreamHeader(64, 64, 1, 0, 3), b"", [(b"", b"")])
