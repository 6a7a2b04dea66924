# (c) 2024 Niels Provos
#
'''
Rasterization of Billiards Worlds

Worlds are drawn with OpenCV at sub-pixel precision on a supersampled canvas and
area-averaged down to the requested resolution. Images are float arrays in [0, 1]
with a fixed palette: balls 1.0, walls 0.6, table interior 0.0 and exterior 0.3.

Object-centric models look at glimpses, square windows that follow a ball. The
frame-centric model looks at the whole table.
'''

from dataclasses import dataclass, field
from functools import lru_cache

import cv2
import numpy as np
from PIL import Image

import constants as C
from physics_core import Vec2

# largest supersampling factor between canvas and output
MAX_SUPERSAMPLE = 8


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    glimpse_size: int = C.GLIMPSE_SIZE
    resolution: int = C.GLIMPSE_RESOLUTION
    frame_resolution: int = C.FRAME_RESOLUTION
    channels: int = 1

    def __post_init__(self):
        if self.resolution < 8 or self.frame_resolution < 8:
            raise ValueError("Render resolutions must be at least 8")
        if self.glimpse_size < 8:
            raise ValueError(f"glimpse_size must be at least 8, got {self.glimpse_size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")


DEFAULT_RENDER = RenderConfig()


@dataclass(frozen=True)
class GlimpseStack:
    """The last STACK_DEPTH glimpses of a ball, oldest first, and the force at t."""
    frames: tuple
    force: Vec2 = field(default_factory=lambda: Vec2(0.0, 0.0))
    ball_id: int = 0

    def __post_init__(self):
        if len(self.frames) != C.STACK_DEPTH:
            raise ValueError(f"A stack holds exactly {C.STACK_DEPTH} frames")
        if len({f.shape for f in self.frames}) != 1:
            raise ValueError("Stack frames must have equal dimensions")

    def as_array(self):
        """Channels-first network input: [STACK_DEPTH * channels, H, W]."""
        return stack_channels(self.frames)


@dataclass(frozen=True)
class FrameStack:
    frames: tuple
    forces: tuple = ()

    def as_array(self):
        return stack_channels(self.frames)


def stack_channels(frames):
    if frames[0].ndim == 2:
        return np.stack(frames, axis=0)
    return np.concatenate([np.moveaxis(f, -1, 0) for f in frames], axis=0)


def _to_canvas(point, origin, scale):
    # cv2 places pixel centers on integer coordinates
    x = (point.x - origin.x) * scale - 0.5
    y = (point.y - origin.y) * scale - 0.5
    factor = 1 << C.DRAW_SHIFT
    return int(round(x * factor)), int(round(y * factor))


def _blend(image, mask, value):
    alpha = mask.astype(np.float64) / 255.0
    return image * (1.0 - alpha) + value * alpha


def _supersample(size, resolution):
    return max(1, min(MAX_SUPERSAMPLE, int(round(size / resolution))))


def render_frame(state, viewport, resolution, channels=1):
    """
    Renders a square window of the world.

    Args:
        state (WorldState): The world to draw.
        viewport (tuple): (center Vec2, side length in world px).
        resolution (int): Output side in pixels, at least 8.
        channels (int): 1 for grayscale, 3 for an RGB copy of the same palette.

    Returns:
        numpy.ndarray: Float image of shape [resolution, resolution(, 3)] in [0, 1].
    """
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    center, size = viewport
    canvas_size = resolution * _supersample(size, resolution)
    scale = canvas_size / size
    origin = Vec2(center.x - size / 2.0, center.y - size / 2.0)

    canvas = np.full((canvas_size, canvas_size), C.INTENSITY_EXTERIOR, dtype=np.float64)
    polygon = np.array([_to_canvas(v, origin, scale) for v in state.table.vertices],
                       dtype=np.int32).reshape(-1, 1, 2)

    mask = np.zeros((canvas_size, canvas_size), dtype=np.uint8)
    cv2.fillPoly(mask, [polygon], 255, lineType=cv2.LINE_AA, shift=C.DRAW_SHIFT)
    canvas = _blend(canvas, mask, C.INTENSITY_INTERIOR)

    mask[:] = 0
    thickness = max(1, int(round(C.WALL_THICKNESS * scale)))
    cv2.polylines(mask, [polygon], True, 255, thickness=thickness,
                  lineType=cv2.LINE_AA, shift=C.DRAW_SHIFT)
    canvas = _blend(canvas, mask, C.INTENSITY_WALL)

    mask[:] = 0
    for ball in state.balls:
        radius = int(round(ball.radius * scale * (1 << C.DRAW_SHIFT)))
        cv2.circle(mask, _to_canvas(ball.center, origin, scale), radius, 255,
                   thickness=-1, lineType=cv2.LINE_AA, shift=C.DRAW_SHIFT)
    canvas = _blend(canvas, mask, C.INTENSITY_BALL)

    if canvas_size != resolution:
        canvas = cv2.resize(canvas, (resolution, resolution), interpolation=cv2.INTER_AREA)
    canvas = np.clip(canvas, 0.0, 1.0)
    if channels == 3:
        canvas = np.repeat(canvas[:, :, np.newaxis], 3, axis=2)
    return canvas


@lru_cache(maxsize=8192)
def _cached_glimpse(state, ball_id, glimpse_size, resolution, channels):
    ball = state.ball(ball_id)
    image = render_frame(state, (ball.center, glimpse_size), resolution, channels)
    image.setflags(write=False)
    return image


def glimpse(state, ball_id, glimpse_size=C.GLIMPSE_SIZE, resolution=C.GLIMPSE_RESOLUTION,
            channels=1):
    """A window of side glimpse_size centered on the ball; raises UnknownBall."""
    return _cached_glimpse(state, ball_id, glimpse_size, resolution, channels)


def _history(t):
    """Indices t-3 .. t, padded by repeating the earliest frame."""
    return [max(0, t - C.STACK_DEPTH + 1 + i) for i in range(C.STACK_DEPTH)]


def glimpse_stack_from_states(states, ball_id, force=None, config=DEFAULT_RENDER):
    """
    Builds a glimpse stack from the most recent states of a rollout.

    Args:
        states (list): World states up to and including the current one.
        ball_id (int): The fixated ball.
        force (Vec2, optional): The force applied at the current step.
        config (RenderConfig): Glimpse size, resolution and channels.

    Returns:
        GlimpseStack: Frames for the last four states, oldest first.
    """
    t = len(states) - 1
    frames = tuple(glimpse(states[i], ball_id, config.glimpse_size, config.resolution,
                           config.channels) for i in _history(t))
    return GlimpseStack(frames, force if force is not None else Vec2(0.0, 0.0), ball_id)


def glimpse_stack(traj, ball_id, t, glimpse_size=C.GLIMPSE_SIZE,
                  resolution=C.GLIMPSE_RESOLUTION, channels=1):
    """The input stack of a ball at step t; the force is nonzero only at t = 0."""
    if not 0 <= t < len(traj):
        raise OutOfRange(f"Step {t} outside trajectory of length {len(traj)}")
    force = traj.forces.get(ball_id, Vec2(0.0, 0.0)) if t == 0 else Vec2(0.0, 0.0)
    config = RenderConfig(glimpse_size, resolution, C.FRAME_RESOLUTION, channels)
    return glimpse_stack_from_states(traj.states[:t + 1], ball_id, force, config)


def frame_viewport(table):
    """Square viewport over the table's bounding box."""
    lo, hi = table.bounding_box
    size = max(hi.x - lo.x, hi.y - lo.y)
    return Vec2((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0), size


@lru_cache(maxsize=4096)
def _cached_frame(state, resolution, channels):
    image = render_frame(state, frame_viewport(state.table), resolution, channels)
    image.setflags(write=False)
    return image


def render_frame_centric(state, resolution=C.FRAME_RESOLUTION, channels=1):
    """The whole table fit into a square image; the short side is letterboxed."""
    return _cached_frame(state, resolution, channels)


def frame_stack_from_states(states, forces=(), config=DEFAULT_RENDER):
    t = len(states) - 1
    frames = tuple(render_frame_centric(states[i], config.frame_resolution, config.channels)
                   for i in _history(t))
    return FrameStack(frames, tuple(forces))


def to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(image, path):
    """Writes an 8-bit binary PPM: P5 for grayscale, P6 for color."""
    data = to_uint8(image)
    mode = 'L' if data.ndim == 2 else 'RGB'
    Image.fromarray(data, mode).save(path, format='PPM')


def load_ppm(path):
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0

