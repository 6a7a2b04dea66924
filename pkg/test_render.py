import tempfile
import unittest
from pathlib import Path

import numpy as np

from physics_core import Ball, Table, UnknownBall, Vec2, WorldState, simulate
from render import (
    GlimpseStack, OutOfRange, RenderConfig, glimpse, glimpse_stack, load_ppm,
    frame_stack_from_states, render_frame, render_frame_centric, save_ppm
)


def near_wall_state():
    table = Table.rectangle(1000, 1000)
    return WorldState((Ball(0, Vec2(35, 500)), Ball(1, Vec2(300, 300))), table)


class TestRenderFrame(unittest.TestCase):
    def test_outside_table_is_exterior(self):
        state = WorldState((Ball(0, Vec2(100, 100)),), Table.rectangle(200, 200))
        image = render_frame(state, (Vec2(1e5, 1e5), 64), 32)
        self.assertEqual(image.shape, (32, 32))
        np.testing.assert_allclose(image, 0.3, atol=1e-12)

    def test_ball_at_center(self):
        state = WorldState((Ball(0, Vec2(1000, 1000)),), Table.rectangle(2000, 2000))
        image = render_frame(state, (Vec2(1000, 1000), 64), 32)
        rows, cols = np.indices(image.shape)
        total = image.sum()
        self.assertAlmostEqual((rows * image).sum() / total, 15.5, delta=0.5)
        self.assertAlmostEqual((cols * image).sum() / total, 15.5, delta=0.5)
        self.assertAlmostEqual(image[16, 16], 1.0, places=6)
        self.assertAlmostEqual(image[0, 0], 0.0, places=6)

    def test_deterministic(self):
        state = near_wall_state()
        first = render_frame(state, (Vec2(100, 480), 200), 40)
        second = render_frame(state, (Vec2(100, 480), 200), 40)
        np.testing.assert_array_equal(first, second)

    def test_pixel_range(self):
        state = near_wall_state()
        for size, resolution in ((64, 32), (200, 16), (1000, 64)):
            image = render_frame(state, (Vec2(60, 520), size), resolution)
            self.assertGreaterEqual(image.min(), 0.0)
            self.assertLessEqual(image.max(), 1.0)

    def test_area_downsampling_preserves_mean(self):
        state = near_wall_state()
        full = render_frame(state, (Vec2(35, 500), 64), 64)
        half = render_frame(state, (Vec2(35, 500), 64), 32)
        self.assertAlmostEqual(full.mean(), half.mean(), delta=1e-6)

    def test_color_channels(self):
        state = near_wall_state()
        gray = render_frame(state, (Vec2(35, 500), 64), 16)
        color = render_frame(state, (Vec2(35, 500), 64), 16, channels=3)
        self.assertEqual(color.shape, (16, 16, 3))
        np.testing.assert_array_equal(color[:, :, 1], gray)


class TestGlimpse(unittest.TestCase):
    def test_ball_on_empty_table(self):
        state = WorldState((Ball(0, Vec2(1000, 1000)),), Table.rectangle(2000, 2000))
        image = glimpse(state, 0, 600, 32)
        # only the fixated disk on the empty interior
        self.assertAlmostEqual(image[0, 0], 0.0, places=6)
        self.assertAlmostEqual(image[:8].max(), 0.0, places=9)
        self.assertGreater(image[16, 16], 0.9)

    def test_wall_visible_near_edge(self):
        image = glimpse(near_wall_state(), 0, 100, 100)
        self.assertAlmostEqual(image[0, 0], 0.3, places=6)
        self.assertGreater(image[0, 10:20].max(), 0.55)
        self.assertAlmostEqual(image[0, 99], 0.0, places=6)

    def test_fixation_invariance(self):
        state = near_wall_state()
        moved = state.translated(Vec2(500, 300))
        for ball_id in (0, 1):
            np.testing.assert_array_equal(glimpse(state, ball_id, 100, 32),
                                          glimpse(moved, ball_id, 100, 32))

    def test_unknown_ball(self):
        with self.assertRaises(UnknownBall):
            glimpse(near_wall_state(), 5)

    def test_read_only(self):
        image = glimpse(near_wall_state(), 0)
        with self.assertRaises(ValueError):
            image[0, 0] = 1.0


class TestGlimpseStack(unittest.TestCase):
    def setUp(self):
        state = WorldState((Ball(0, Vec2(150, 150)),), Table.rectangle(300, 300))
        self.traj = simulate(state, {0: Vec2(60000, 30000)}, 12)

    def test_padding_at_start(self):
        stack = glimpse_stack(self.traj, 0, 0)
        self.assertEqual(stack.force, Vec2(60000, 30000))
        for frame in stack.frames:
            np.testing.assert_array_equal(frame, stack.frames[0])
        self.assertEqual(stack.as_array().shape, (4, 32, 32))

    def test_frames_in_order(self):
        stack = glimpse_stack(self.traj, 0, 3)
        for i, frame in enumerate(stack.frames):
            np.testing.assert_array_equal(frame, glimpse(self.traj.states[i], 0))

    def test_no_force_after_start(self):
        self.assertEqual(glimpse_stack(self.traj, 0, 10).force, Vec2(0, 0))

    def test_out_of_range(self):
        with self.assertRaises(OutOfRange):
            glimpse_stack(self.traj, 0, len(self.traj))
        with self.assertRaises(OutOfRange):
            glimpse_stack(self.traj, 0, -1)

    def test_stack_shape_validation(self):
        frame = np.zeros((8, 8))
        with self.assertRaises(ValueError):
            GlimpseStack((frame, frame, frame))
        with self.assertRaises(ValueError):
            GlimpseStack((frame, frame, frame, np.zeros((9, 9))))


class TestFrameCentric(unittest.TestCase):
    def test_square_table_fills_frame(self):
        state = WorldState((Ball(0, Vec2(60, 60)),), Table.rectangle(300, 300))
        image = render_frame_centric(state, 32)
        self.assertEqual(image[16, 16], 0.0)
        self.assertFalse(np.any(np.isclose(image[2:-2, 12:-2], 0.3, atol=0.02)))

    def test_letterbox(self):
        state = WorldState((Ball(0, Vec2(60, 60)),), Table.rectangle(550, 300))
        image = render_frame_centric(state, 32)
        np.testing.assert_allclose(image[:5], 0.3, atol=1e-9)
        np.testing.assert_allclose(image[-5:], 0.3, atol=1e-9)
        self.assertEqual(image[16, 16], 0.0)

    def test_deterministic_stack(self):
        state = WorldState((Ball(0, Vec2(60, 60)),), Table.rectangle(550, 300))
        traj = simulate(state, {0: Vec2(80000, 0)}, 5)
        config = RenderConfig(frame_resolution=24)
        first = frame_stack_from_states(traj.states, (), config).as_array()
        second = frame_stack_from_states(traj.states, (), config).as_array()
        self.assertEqual(first.shape, (4, 24, 24))
        np.testing.assert_array_equal(first, second)


class TestPPM(unittest.TestCase):
    def test_gray_and_color(self):
        image = glimpse(near_wall_state(), 0, 100, 32)
        with tempfile.TemporaryDirectory() as tmp:
            gray_path = Path(tmp) / 'gray.ppm'
            color_path = Path(tmp) / 'color.ppm'
            save_ppm(image, gray_path)
            save_ppm(np.repeat(image[:, :, np.newaxis], 3, axis=2), color_path)
            self.assertEqual(gray_path.read_bytes()[:2], b'P5')
            self.assertEqual(color_path.read_bytes()[:2], b'P6')
            np.testing.assert_allclose(load_ppm(gray_path), image, atol=0.5 / 255 + 1e-12)
            self.assertEqual(load_ppm(color_path).shape, (32, 32, 3))


if __name__ == '__main__':
    unittest.main()
