# (c) 2024 Niels Provos
#
'''
Training of Velocity Predictors

Minibatches are random windows of consecutive frames. Each window starts with a fresh
recurrent state and is unrolled frame by frame; the loss at frame t compares the
predicted velocities u_{t+1} .. u_{t+h} with the simulated ones, weighted by
exp(-k^(1/4)) and masked where the sequence ends before t + h.

The optimizer is SGD with classical momentum. The set of minibatches is drawn once
from the seed and revisited every epoch, so a run is a pure function of
(dataset, config, seed).
'''

import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

import constants as C
from physics_core import Vec2
from predictors import (
    LEARNED, RecurrentState, TooManyBalls, init_params, network_forward, save_predictor,
    scaled_force
)
from render import frame_stack_from_states, glimpse_stack_from_states
from tensor_autodiff import ParamSet, Tape, backward, horizon_weights, sgd_step
from utils import csv_bytes, format_float, make_rng, timeit

LOG_HEADER = ('epoch', 'mean_loss', 'wall_seconds')
LOG_FILE = 'train_log.csv'


class SequenceTooShort(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"Loss became {loss} in epoch {epoch}")
        self.epoch = epoch


class CheckpointMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = C.HORIZON
    batch_sequences: int = 50
    subseq_len: int = 20
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    batches_per_epoch: int = 4
    # (dataset directory, epochs) per stage, ordered by ball count
    curriculum: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'curriculum',
                           tuple((str(path), int(epochs)) for path, epochs in self.curriculum))
        for name in ('horizon', 'batch_sequences', 'subseq_len', 'epochs', 'batches_per_epoch'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be a finite non-negative number, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if any(epochs < 1 for _, epochs in self.curriculum):
            raise ValueError("Every curriculum stage needs at least one epoch")

    def to_dict(self):
        data = asdict(self)
        data['curriculum'] = [list(stage) for stage in self.curriculum]
        return data


@dataclass(frozen=True)
class Window:
    """Consecutive frames start .. start + length - 1 of one trajectory."""
    trajectory: object
    start: int
    length: int
    sequence_index: int = 0

    @property
    def frames(self):
        return range(self.start, self.start + self.length)

    def targets(self, ball_id, horizon):
        """Per frame (targets [h, 2], mask [h]) of the simulated future velocities."""
        return [self.trajectory.future_velocities(ball_id, t, horizon) for t in self.frames]


@dataclass
class TrainResult:
    params: ParamSet
    losses: list


def make_minibatch(dataset, cfg, rng):
    """
    Draws cfg.batch_sequences windows of cfg.subseq_len frames uniformly over
    (sequence, start) pairs.

    Raises:
        SequenceTooShort: If any sequence has fewer frames than a window.
    """
    lengths = [len(seq.trajectory) for seq in dataset.sequences]
    short = [i for i, n in enumerate(lengths) if n < cfg.subseq_len]
    if short:
        raise SequenceTooShort(f"Sequence {short[0]} has {lengths[short[0]]} frames, "
                               f"windows need {cfg.subseq_len}")
    windows = []
    for _ in range(cfg.batch_sequences):
        index = int(rng.integers(len(lengths)))
        start = int(rng.integers(0, lengths[index] - cfg.subseq_len + 1))
        windows.append(Window(dataset.sequences[index].trajectory, start, cfg.subseq_len, index))
    return windows


def _force_at(traj, ball_id, t):
    if t == 0:
        return traj.forces.get(ball_id, Vec2(0.0, 0.0))
    return Vec2(0.0, 0.0)


def _history(traj, t):
    return traj.states[max(0, t - C.STACK_DEPTH + 1):t + 1]


def _oc_window_loss(tape, model, window, weights):
    traj = window.trajectory
    losses = []
    for ball_id in traj.ball_ids:
        state = RecurrentState.zeros(model.arch).as_constants(tape)
        for t, (targets, mask) in zip(window.frames, window.targets(ball_id, model.arch.horizon)):
            force = _force_at(traj, ball_id, t)
            stack = glimpse_stack_from_states(_history(traj, t), ball_id, force, model.render)
            out, state = network_forward(tape, model.params, model.arch, stack.as_array(),
                                         scaled_force(force, model.arch), state)
            losses.append(tape.weighted_horizon_loss(out, targets, weights, mask))
    return tape.scale(tape.add_n(losses), 1.0 / len(losses))


def _fc_window_loss(tape, model, window, weights):
    traj, arch = window.trajectory, model.arch
    ball_ids = sorted(traj.ball_ids)
    if len(ball_ids) > arch.max_balls:
        raise TooManyBalls(f"{len(ball_ids)} balls exceed the {arch.max_balls} model slots")
    h = arch.horizon
    slot_weights = np.tile(weights, arch.max_balls)
    per_ball = [window.targets(ball_id, h) for ball_id in ball_ids]

    state = RecurrentState.zeros(arch).as_constants(tape)
    losses = []
    for step_index, t in enumerate(window.frames):
        frames = frame_stack_from_states(_history(traj, t), (), model.render)
        force_input = np.zeros(arch.force_inputs)
        targets = np.zeros((arch.max_balls * h, 2))
        mask = np.zeros(arch.max_balls * h)
        for slot, ball_id in enumerate(ball_ids):
            force_input[2 * slot:2 * slot + 2] = scaled_force(_force_at(traj, ball_id, t), arch)
            targets[slot * h:(slot + 1) * h], mask[slot * h:(slot + 1) * h] = \
                per_ball[slot][step_index]
        out, state = network_forward(tape, model.params, arch, frames.as_array(),
                                     force_input, state)
        losses.append(tape.weighted_horizon_loss(out, targets, slot_weights, mask))
    return tape.scale(tape.add_n(losses), 1.0 / (len(losses) * len(ball_ids)))


def window_loss(tape, model, window):
    """Mean per-ball, per-frame loss of one window as a scalar Tensor."""
    weights = horizon_weights(model.arch.horizon)
    if model.name == C.MODEL_FC:
        return _fc_window_loss(tape, model, window, weights)
    return _oc_window_loss(tape, model, window, weights)


def evaluate_loss(model, windows):
    """Mean window loss without touching gradients."""
    return float(np.mean([window_loss(Tape(), model, w).item() for w in windows]))


def train_step(model, windows, cfg):
    """
    One SGD step on the mean loss over the windows.

    Returns:
        float: The batch loss before the update.
    """
    model.params.zero_grad()
    total = 0.0
    for window in windows:
        tape = Tape()
        loss = window_loss(tape, model, window)
        backward(tape, tape.scale(loss, 1.0 / len(windows)))
        total += loss.item()
    mean = total / len(windows)
    if math.isfinite(mean):
        sgd_step(model.params, cfg.lr, cfg.momentum)
    return mean


def append_log(log_path, epoch, mean_loss, wall_seconds):
    log_path = Path(log_path)
    data = csv_bytes(LOG_HEADER, [(epoch, format_float(mean_loss, 9),
                                   format_float(wall_seconds, 3))])
    if log_path.exists():
        data = data.split(b'\n', 1)[1]
    with open(log_path, 'ab') as file:
        file.write(data)


@timeit
def train(model, dataset, cfg, log_path=None, progress_callback=None):
    """
    Trains an OC or FC predictor in place.

    Args:
        model (ObjectCentricPredictor or FrameCentricPredictor): Holds the architecture,
            the parameters to update and the render settings.
        dataset (Dataset): Training sequences.
        cfg (TrainConfig): Optimizer and batching settings.
        log_path (str or Path, optional): CSV log, one row appended per epoch.
        progress_callback (callable, optional): Called with (epoch, epochs).

    Returns:
        TrainResult: The parameters and the per-epoch mean losses.
    """
    if cfg.horizon != model.arch.horizon:
        raise ValueError(f"Config horizon {cfg.horizon} != model horizon {model.arch.horizon}")
    batches = [make_minibatch(dataset, cfg, make_rng(cfg.seed, 1, b))
               for b in range(cfg.batches_per_epoch)]

    losses = []
    start_time = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        mean = float(np.mean([train_step(model, batch, cfg) for batch in batches]))
        if not math.isfinite(mean):
            raise DivergenceDetected(epoch, mean)
        losses.append(mean)
        print(f"Epoch {epoch}/{cfg.epochs}: loss {mean:.6f}")
        if log_path is not None:
            append_log(log_path, epoch, mean, time.perf_counter() - start_time)
        if progress_callback:
            progress_callback(epoch, cfg.epochs)
    model.trained_balls = dataset.spec.n_balls
    return TrainResult(model.params, losses)


def new_model(arch, seed, render=None):
    return LEARNED[arch.kind](arch, init_params(arch, seed), render)


def load_into(model, checkpoint):
    """Copies checkpoint values into the model; the architectures must match."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CheckpointMissing(f"Checkpoint {checkpoint} does not exist")
    params, _ = ParamSet.load(checkpoint)
    model.params.load_state(params)
    return model


def stage_filename(index, n_balls):
    return f"stage{index + 1}_{n_balls}b.blnn"


def train_curriculum(arch, stages, cfg, out_dir, render=None, initial=None,
                     progress_callback=None):
    """
    Trains one stage per dataset, initializing each stage from the previous stage's
    checkpoint.

    Args:
        arch (Architecture): Shared by all stages.
        stages (list): (Dataset, epochs) pairs ordered by ball count.
        cfg (TrainConfig): Settings shared by all stages.
        out_dir (str or Path): Receives one checkpoint per stage and the training log.
        render (RenderConfig, optional): Input rendering.
        initial (str or Path, optional): Checkpoint initializing the first stage.

    Returns:
        list: Checkpoint paths, one per stage.
    """
    counts = [dataset.spec.n_balls for dataset, _ in stages]
    if counts != sorted(counts):
        raise ValueError(f"Curriculum stages must be ordered by ball count, got {counts}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    checkpoints = []
    previous = initial
    for index, (dataset, epochs) in enumerate(stages):
        model = new_model(arch, cfg.seed, render)
        if previous is not None:
            load_into(model, previous)
        print(f"Curriculum stage {index + 1}/{len(stages)}: {counts[index]} balls, "
              f"{len(dataset)} sequences")
        train(model, dataset, replace(cfg, epochs=epochs), out_dir / LOG_FILE)
        path = out_dir / stage_filename(index, counts[index])
        save_predictor(model, path)
        print(f"Saved checkpoint to {path}")
        checkpoints.append(path)
        previous = path
        if progress_callback:
            progress_callback(index + 1, len(stages))
    return checkpoints
