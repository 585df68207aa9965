import struct

import numpy as np
import pytest

from feat_io import HEADER, HEADER_SIZE, FeatFile, decode_feat, encode_feat, read_feat, write_feat
from soyo_core import FormatError


def _sample(labels=True):
    features = np.array([[1.0, -2.5, 0.125], [3.0, 4.0, 1e-3]], dtype=np.float32)
    return FeatFile(features, np.array([7, 7]) if labels else None)


def _patched(data: bytes, offset: int, value: bytes) -> bytes:
    return data[:offset] + value + data[offset + len(value):]


class TestEncoding:
    def test_header_layout(self):
        data = encode_feat(_sample())
        assert HEADER_SIZE == 24
        assert data[:4] == b"FEAT"
        assert struct.unpack_from("<HHQIB", data, 4) == (1, 1, 2, 3, 1)
        assert data[21:24] == b"\x00\x00\x00"
        assert len(data) == 24 + 2 * 3 * 4 + 2 * 4

    def test_round_trip(self):
        feat = decode_feat(encode_feat(_sample()))
        assert feat.features.dtype == np.dtype("<f4")
        assert np.array_equal(feat.features, _sample().features)
        assert feat.labels.tolist() == [7, 7]

    def test_without_labels(self):
        data = encode_feat(_sample(labels=False))
        assert len(data) == 24 + 24
        assert decode_feat(data).labels is None

    def test_zero_rows(self):
        feat = decode_feat(encode_feat(FeatFile(np.zeros((0, 4), dtype=np.float32))))
        assert feat.features.shape == (0, 4)

    def test_label_count_must_match_rows(self):
        with pytest.raises(FormatError):
            FeatFile(np.zeros((2, 2)), np.array([1, 2, 3]))


class TestRejection:
    def _location(self, data):
        with pytest.raises(FormatError) as info:
            decode_feat(data)
        return info.value.location

    def test_truncated_header(self):
        assert self._location(b"FEAT\x01\x00") == 6

    def test_bad_magic(self):
        assert self._location(_patched(encode_feat(_sample()), 0, b"TAEF")) == 0

    def test_unsupported_version(self):
        data = _patched(encode_feat(_sample()), 4, struct.pack("<H", 2))
        with pytest.raises(FormatError, match="unsupported version") as info:
            decode_feat(data)
        assert info.value.location == 4

    def test_unknown_flags(self):
        assert self._location(_patched(encode_feat(_sample()), 6, struct.pack("<H", 3))) == 6

    def test_zero_dim(self):
        data = HEADER.pack(b"FEAT", 1, 0, 0, 0, 1)
        assert self._location(data) == 16

    def test_unknown_dtype(self):
        assert self._location(_patched(encode_feat(_sample()), 20, b"\x02")) == 20

    def test_reserved_bytes(self):
        assert self._location(_patched(encode_feat(_sample()), 22, b"\x01")) == 21

    def test_truncated_payload(self):
        data = encode_feat(_sample())[:-3]
        assert self._location(data) == len(data)

    def test_trailing_bytes(self):
        data = encode_feat(_sample())
        assert self._location(data + b"\x00") == len(data)

    def test_non_finite_value(self):
        data = _patched(encode_feat(_sample()), 24 + 4 * 4, struct.pack("<f", float("nan")))
        assert self._location(data) == 24 + 16


class TestFiles:
    def test_write_then_read(self, tmp_path):
        path = tmp_path / "nested" / "d00_train_last.feat"
        write_feat(path, np.array([[0.5, 1.5]]), np.array([0]))
        feat = read_feat(path)
        assert feat.features.tolist() == [[0.5, 1.5]]
        assert feat.labels.tolist() == [0]

    def test_read_error_names_file(self, tmp_path):
        path = tmp_path / "broken.feat"
        path.write_bytes(encode_feat(_sample())[:30])
        with pytest.raises(FormatError, match="broken.feat") as info:
            read_feat(path)
        assert info.value.location == 30
