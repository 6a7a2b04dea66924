# (c) 2024 Niels Provos
#
'''
Visual Imagination

A rollout starts from a single world state. At every step the predictor sees the
states imagined so far, each ball is translated by its predicted velocity for the
next step, and the new positions are what the predictor sees next. Nothing is
corrected: imagined balls may overlap or leave the table when the predictor errs.
'''

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from physics_core import DEFAULT_PARAMS, Trajectory, WorldState, apply_force, save_trajectory
from predictors import Observation
from render import render_frame_centric, save_ppm
from utils import timeit


class IOFailure(RuntimeError):
    pass


@dataclass
class ImaginedTrajectory:
    """Imagined states; each ball's velocity is the displacement it was moved by."""
    states: list
    forces: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    @property
    def table(self):
        return self.states[0].table

    def centers(self, ball_id):
        index = self.states[0].index_of(ball_id)
        return np.array([s.balls[index].center.as_tuple() for s in self.states])


def advance(state, predictions):
    """Moves every ball by its k = 1 predicted velocity."""
    balls = []
    for ball in state.balls:
        velocity = predictions[ball.id].step(1)
        balls.append(replace(ball, center=ball.center + velocity, velocity=velocity))
    return WorldState(tuple(balls), state.table, state.t + 1)


def imagine(initial, forces, predictor, T, render=None, params=DEFAULT_PARAMS,
            progress_callback=None):
    """
    Rolls a world forward with a predictor instead of the simulator.

    Args:
        initial (WorldState): The only ground truth the rollout sees.
        forces (dict): Ball id to force Vec2, applied before the first step.
        predictor (Predictor): Supplies per-ball velocities.
        T (int): Number of imagined steps, at least 1.
        render (RenderConfig, optional): When given, every state is also rendered as a
            whole-table frame at render.frame_resolution.
        params (PhysicsParams): Converts forces into initial velocities.
        progress_callback (callable, optional): Called with (step, T).

    Returns:
        ImaginedTrajectory: T + 1 states, the first one carrying the forces.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    state = initial
    for ball_id in sorted(forces):
        state = apply_force(state, ball_id, forces[ball_id], params)

    states = [state]
    contexts = predictor.new_contexts(state)
    for step_index in range(T):
        predictions, contexts = predictor.predict_all(Observation(states, forces), contexts)
        states.append(advance(states[-1], predictions))
        if progress_callback:
            progress_callback(step_index + 1, T)

    frames = []
    if render is not None:
        frames = [np.array(render_frame_centric(s, render.frame_resolution, render.channels))
                  for s in states]
    return ImaginedTrajectory(states, dict(forces), frames)


def frame_filename(index):
    return f"frame_{index:05}.ppm"


@timeit
def dump_frames(imagined, directory):
    """
    Writes the rendered frames as numbered PPM files.

    Returns:
        int: The number of files written; 0 if nothing was rendered.

    Raises:
        IOFailure: If the directory or a file cannot be written.
    """
    if not imagined.frames:
        print("Warning: imagined trajectory has no rendered frames, nothing to write")
        return 0
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for index, frame in enumerate(imagined.frames):
            save_ppm(frame, directory / frame_filename(index))
    except OSError as e:
        raise IOFailure(f"Could not write frames to {directory}: {e}") from e
    print(f"Saved {len(imagined.frames)} frames to {directory}")
    return len(imagined.frames)


def imagination_to_trajectory(imagined):
    """A Trajectory view of the rollout with an empty event list."""
    return Trajectory(list(imagined.states), [], dict(imagined.forces))


def save_imagination(imagined, path):
    try:
        save_trajectory(imagination_to_trajectory(imagined), path)
    except OSError as e:
        raise IOFailure(f"Could not write {path}: {e}") from e
