import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from utils import (
    canonical_json, csv_bytes, format_float, load_json, make_rng, split_seed, timeit,
    write_bytes_atomic
)


class TestSeeds(unittest.TestCase):
    def test_split_seed_is_stable(self):
        self.assertEqual(split_seed(5, 3), split_seed(5, 3))
        self.assertNotEqual(split_seed(5, 3), split_seed(5, 4))
        self.assertNotEqual(split_seed(5, 3), split_seed(6, 3))

    def test_children_independent_of_order(self):
        forward = [split_seed(9, i) for i in range(5)]
        backward = [split_seed(9, i) for i in reversed(range(5))]
        self.assertEqual(forward, backward[::-1])
        self.assertEqual(len(set(forward)), 5)

    def test_make_rng(self):
        first = make_rng(1, 2, 3).uniform(size=4)
        second = make_rng(1, 2, 3).uniform(size=4)
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, make_rng(1, 2, 4).uniform(size=4)))


class TestJson(unittest.TestCase):
    def test_canonical(self):
        data = canonical_json({'b': 1, 'a': [1, 2]})
        self.assertEqual(data, b'{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}')
        self.assertEqual(load_json(data), {'a': [1, 2], 'b': 1})

    def test_numpy_values(self):
        self.assertEqual(load_json(canonical_json({'x': np.arange(3)})), {'x': [0, 1, 2]})


class TestWriteBytesAtomic(unittest.TestCase):
    def test_writes_and_replaces(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'report.csv'
            write_bytes_atomic(path, b'first')
            write_bytes_atomic(path, b'second')
            self.assertEqual(path.read_bytes(), b'second')
            self.assertEqual([p.name for p in Path(tmp).iterdir()], ['report.csv'])

    @patch('utils.shutil.move')
    def test_restore_on_error(self, mock_move):
        mock_move.side_effect = OSError('disk full')
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'report.csv'
            path.write_bytes(b'old')
            with self.assertRaises(OSError):
                write_bytes_atomic(path, b'new')
            self.assertEqual(path.read_bytes(), b'old')
            self.assertFalse(path.with_suffix('.csv.tmp').exists())


class TestFormatting(unittest.TestCase):
    def test_csv_bytes(self):
        data = csv_bytes(('a', 'b'), [(1, 'x'), (2, '')])
        self.assertEqual(data, b'a,b\n1,x\n2,\n')

    def test_format_float(self):
        self.assertEqual(format_float(0.1234567), '0.123457')
        self.assertEqual(format_float(2.0, 2), '2.00')
        self.assertEqual(format_float(None), '')

    def test_timeit(self):
        @timeit
        def double(x):
            return 2 * x

        with patch('builtins.print') as mock_print:
            self.assertEqual(double(4), 8)
        self.assertTrue(mock_print.call_args[0][0].startswith('Function double took'))


if __name__ == '__main__':
    unittest.main()
