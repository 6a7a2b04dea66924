import math
import unittest

import constants as C


class TestConstants(unittest.TestCase):

    def test_unique_constants(self):
        constants_dict = {name: value for name, value in vars(
            C).items() if isinstance(value, str)}
        values = list(constants_dict.values())
        unique_values = set(values)

        if len(values) != len(unique_values):
            # Find non-unique values
            duplicates = set(
                [value for value in values if values.count(value) > 1])
            non_unique_constants = {
                name: value for name, value in constants_dict.items() if value in duplicates}
            self.fail(
                f"String constants are not unique: {non_unique_constants}")

    def test_force_calibration(self):
        self.assertAlmostEqual(C.FORCE_MAX * C.IMPULSE_SCALE, C.MAX_SPEED, places=12)
        self.assertAlmostEqual(C.FORCE_MIN * C.IMPULSE_SCALE, 3.75, places=12)

    def test_ranges(self):
        for lo, hi in (C.TRAIN_LENGTH_RANGE, C.LARGE_LENGTH_RANGE, C.SEQ_LEN_RANGE):
            self.assertLess(lo, hi)
        self.assertLess(C.TRAIN_LENGTH_RANGE[1], C.LARGE_LENGTH_RANGE[0])
        self.assertGreater(C.TRAIN_LENGTH_RANGE[0], 2 * C.BALL_RADIUS)
        self.assertEqual(list(C.HIT_THRESHOLDS), sorted(C.HIT_THRESHOLDS))

    def test_exit_codes_distinct(self):
        codes = (C.EXIT_VALIDATION, C.EXIT_GENERATION, C.EXIT_IO, C.EXIT_NUMERICAL)
        self.assertEqual(len(set(codes)), 4)
        self.assertNotIn(0, codes)

    def test_tolerances(self):
        for eps in (C.EPS_PENETRATION, C.EPS_CONTACT, C.EPS_TIE, C.EPS_VELOCITY):
            self.assertTrue(0 < eps < 1e-3 and math.isfinite(eps))


if __name__ == '__main__':
    unittest.main()
