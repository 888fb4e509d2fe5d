import struct
import unittest

import numpy as np

from mafnet._codec import HSD_HEADER_SIZE, decode_hsd, decode_mafw, encode_hsd, encode_mafw
from mafnet.errors import FormatError


class HSDCodecTestCase(unittest.TestCase):
    def test_header_layout(self):
        raw = encode_hsd(np.zeros((3, 4, 5), dtype=np.float32))
        assert raw[:4] == b"HSDC"
        assert len(raw) == HSD_HEADER_SIZE + 3 * 4 * 5 * 4
        assert struct.unpack_from("<3I", raw, 8) == (3, 4, 5)

    def test_round_trip(self):
        data = np.random.default_rng(0).standard_normal((2, 3, 7)).astype(np.float32)
        np.testing.assert_array_equal(decode_hsd(encode_hsd(data)), data)

    def test_bad_magic(self):
        raw = bytearray(encode_hsd(np.zeros((1, 1, 1), dtype=np.float32)))
        raw[:4] = b"XXXX"
        with self.assertRaises(FormatError):
            decode_hsd(bytes(raw))

    def test_bad_version_and_dtype(self):
        raw = bytearray(encode_hsd(np.zeros((1, 1, 1), dtype=np.float32)))
        raw[4] = 9
        with self.assertRaises(FormatError):
            decode_hsd(bytes(raw))
        raw[4] = 1
        raw[5] = 3
        with self.assertRaises(FormatError):
            decode_hsd(bytes(raw))

    def test_length_mismatch(self):
        raw = encode_hsd(np.zeros((2, 2, 2), dtype=np.float32))
        with self.assertRaises(FormatError):
            decode_hsd(raw + b"\x00")
        with self.assertRaises(FormatError):
            decode_hsd(raw[:10])


class MAFWCodecTestCase(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(1)
        self.tensors = {
            "b.weight": rng.standard_normal((4, 2, 3, 3)).astype(np.float32),
            "a.bias": rng.standard_normal(4).astype(np.float32),
        }
        self.config = {"bands": 2, "base_channels": 4}

    def test_round_trip(self):
        raw = encode_mafw(self.config, self.tensors, {"stage_history": [{"name": "complex"}]})
        config, tensors, extra = decode_mafw(raw)
        assert config == self.config
        assert list(tensors) == ["a.bias", "b.weight"]
        for path, value in self.tensors.items():
            assert tensors[path].tobytes() == value.tobytes()
        assert extra == {"stage_history": [{"name": "complex"}]}

    def test_bytes_do_not_depend_on_insertion_order(self):
        reversed_tensors = dict(reversed(list(self.tensors.items())))
        assert encode_mafw(self.config, self.tensors) == encode_mafw(self.config, reversed_tensors)

    def test_corrupt(self):
        raw = encode_mafw(self.config, self.tensors)
        with self.assertRaises(FormatError):
            decode_mafw(raw[:-3])
        with self.assertRaises(FormatError):
            decode_mafw(raw + b"\x00")
        with self.assertRaises(FormatError):
            decode_mafw(b"MAFX" + raw[4:])
