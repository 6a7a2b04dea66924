# (c) 2024 Niels Provos
#
'''
Prediction Error Metrics

Predicted velocities are compared with the simulated per-step displacements using
the angle between the two vectors and the relative error of the magnitude. Errors
are averaged over all frames of all sequences for every step k of the horizon, once
for all frames and once for frames close to a collision.
'''

import math
from dataclasses import dataclass, field

import numpy as np

import constants as C
from predictors import Observation
from utils import csv_bytes, format_float, timeit, write_bytes_atomic
from worldgen import family_spec

STRATA = (C.STRATUM_OVERALL, C.STRATUM_NEAR, C.STRATUM_FAR)
REPORT_STEPS = (1, 5, 20)
CSV_HEADER = ('model', 'dataset', 'stratum', 'k', 'angular_deg', 'magnitude_rel',
              'count', 'excluded', 'transfer')


def angular_error(u, u_hat, eps=C.EPS_VELOCITY):
    """
    Angle between the true and the predicted velocity.

    Args:
        u (Vec2): The ground-truth velocity.
        u_hat (Vec2): The predicted velocity.
        eps (float): Velocities at or below this norm count as zero.

    Returns:
        float or None: Degrees in [0, 180]; None if u is too small to have a direction.
    """
    if u.norm() <= eps:
        return None
    if u_hat.norm() <= eps:
        return 180.0
    return math.degrees(math.atan2(abs(u.cross(u_hat)), u.dot(u_hat)))


def magnitude_rel_error(u, u_hat, eps=C.EPS_VELOCITY):
    """||u_hat| - |u|| / |u|, or None if |u| <= eps."""
    norm = u.norm()
    if norm <= eps:
        return None
    return abs(u_hat.norm() - norm) / norm


def velocity_errors(predicted, targets, eps=C.EPS_VELOCITY):
    """
    Vectorized angular and magnitude errors for arrays of shape [n, 2].

    Returns:
        tuple: (angles in degrees, relative magnitude errors, valid mask); entries with
            a target norm at or below eps are invalid and set to zero.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    true_norm = np.hypot(targets[:, 0], targets[:, 1])
    pred_norm = np.hypot(predicted[:, 0], predicted[:, 1])
    valid = true_norm > eps

    cross = targets[:, 0] * predicted[:, 1] - targets[:, 1] * predicted[:, 0]
    dot = targets[:, 0] * predicted[:, 0] + targets[:, 1] * predicted[:, 1]
    angles = np.degrees(np.arctan2(np.abs(cross), dot))
    angles = np.where(pred_norm <= eps, 180.0, angles)

    safe = np.where(valid, true_norm, 1.0)
    magnitudes = np.abs(pred_norm - true_norm) / safe
    return np.where(valid, angles, 0.0), np.where(valid, magnitudes, 0.0), valid


def near_collision_mask(seq, window=C.NEAR_COLLISION_WINDOW):
    """
    Flags the frames within `window` steps of a collision.

    Args:
        seq (Sequence or Trajectory): Its events carry the step they happened in.
        window (int): Half width of the neighborhood.

    Returns:
        np.ndarray: Boolean flag per frame.
    """
    traj = getattr(seq, 'trajectory', seq)
    mask = np.zeros(len(traj), dtype=bool)
    for event in traj.events:
        lo = max(0, event.step - window)
        hi = min(len(traj), event.step + window + 1)
        mask[lo:hi] = True
    return mask


@dataclass
class ErrorTable:
    """
    Accumulated error sums and sample counts per stratum and horizon step.

    `frames` counts the (frame, ball) pairs that had at least one target.
    """
    horizon: int
    name: str = ''
    angular_sum: dict = field(default_factory=dict)
    magnitude_sum: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    frames: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        for stratum in STRATA:
            self.angular_sum.setdefault(stratum, np.zeros(self.horizon))
            self.magnitude_sum.setdefault(stratum, np.zeros(self.horizon))
            self.counts.setdefault(stratum, np.zeros(self.horizon, dtype=np.int64))
            self.excluded.setdefault(stratum, np.zeros(self.horizon, dtype=np.int64))
            self.frames.setdefault(stratum, 0)

    def add(self, near, predicted, targets, mask):
        """
        Adds one predicted horizon of one ball at one frame.

        Args:
            near (bool): Whether the frame is close to a collision.
            predicted (np.ndarray): [horizon, 2] predicted velocities.
            targets (np.ndarray): [horizon, 2] simulated velocities.
            mask (np.ndarray): [horizon] 1 where the target exists.
        """
        present = np.asarray(mask) > 0
        if not np.any(present):
            return
        angles, magnitudes, valid = velocity_errors(predicted, targets)
        used = present & valid
        for stratum in (C.STRATUM_OVERALL, C.STRATUM_NEAR if near else C.STRATUM_FAR):
            self.angular_sum[stratum] += angles * used
            self.magnitude_sum[stratum] += magnitudes * used
            self.counts[stratum] += used
            self.excluded[stratum] += present & ~valid
            self.frames[stratum] += 1

    def _mean(self, sums, stratum):
        counts = self.counts[stratum]
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(counts > 0, sums[stratum] / np.maximum(counts, 1), np.nan)

    def mean_angular(self, stratum=C.STRATUM_OVERALL):
        """Mean angular error per k in degrees; NaN where no sample exists."""
        return self._mean(self.angular_sum, stratum)

    def mean_magnitude(self, stratum=C.STRATUM_OVERALL):
        return self._mean(self.magnitude_sum, stratum)

    def cell(self, stratum, k):
        """(mean angle, mean relative magnitude) at step k, or None without samples."""
        if not 1 <= k <= self.horizon or self.counts[stratum][k - 1] == 0:
            return None
        index = k - 1
        return float(self.mean_angular(stratum)[index]), float(self.mean_magnitude(stratum)[index])

    def rows(self, model=''):
        for stratum in STRATA:
            angular = self.mean_angular(stratum)
            magnitude = self.mean_magnitude(stratum)
            for k in range(1, self.horizon + 1):
                count = int(self.counts[stratum][k - 1])
                yield (model, self.name, stratum, k,
                       format_float(float(angular[k - 1]) if count else None),
                       format_float(float(magnitude[k - 1]) if count else None),
                       count, int(self.excluded[stratum][k - 1]))


def _future(displacements, t, horizon):
    targets = np.zeros((horizon, 2))
    mask = np.zeros(horizon)
    available = min(horizon, len(displacements) - t)
    if available > 0:
        targets[:available] = displacements[t:t + available]
        mask[:available] = 1.0
    return targets, mask


def evaluate_sequence(predictor, traj, table, horizon):
    """Runs a predictor over every frame of one trajectory and adds its errors to table."""
    near = near_collision_mask(traj)
    displacements = {ball_id: traj.displacements(ball_id) for ball_id in traj.ball_ids}
    contexts = predictor.new_contexts(traj.states[0])
    for t in range(len(traj)):
        observation = Observation(traj.states[:t + 1], traj.forces)
        predictions, contexts = predictor.predict_all(observation, contexts)
        for ball_id, disp in displacements.items():
            targets, mask = _future(disp, t, horizon)
            table.add(bool(near[t]), predictions[ball_id].velocities[:horizon], targets, mask)


@timeit
def evaluate(predictor, datasets, h=None, progress_callback=None):
    """
    Evaluates a predictor on held-out datasets.

    Every sequence is replayed from its first frame so recurrent predictors build up
    their context exactly as they would in a rollout.

    Args:
        predictor (Predictor): The model under test.
        datasets (list): Datasets, each reported under its world name.
        h (int, optional): Horizon to evaluate; defaults to the predictor horizon.
        progress_callback (callable, optional): Called with (done, total) sequences.

    Returns:
        dict: Dataset name to ErrorTable.
    """
    h = h or predictor.horizon
    if h > predictor.horizon:
        raise ValueError(f"Cannot evaluate {h} steps with a horizon {predictor.horizon} model")

    total = sum(len(d) for d in datasets)
    done = 0
    tables = {}
    for dataset in datasets:
        name = dataset.spec.name or f"dataset-{len(tables)}"
        table = ErrorTable(h, name)
        for seq in dataset.sequences:
            evaluate_sequence(predictor, seq.trajectory, table, h)
            done += 1
            if progress_callback:
                progress_callback(done, total)
        tables[name] = table
        print(f"Evaluated {predictor.name} on {name}: {table.frames[C.STRATUM_OVERALL]} "
              f"frames, {int(table.excluded[C.STRATUM_OVERALL].sum())} excluded samples")
    return tables


def write_error_csv(results, path, labels=None):
    """
    Writes every cell of every table.

    Args:
        results (dict): Model name to {dataset name: ErrorTable}.
        path (str or Path): The CSV file.
        labels (dict, optional): (model, dataset name) to a transfer label.
    """
    labels = labels or {}
    rows = []
    for model in sorted(results):
        for name in sorted(results[model]):
            label = labels.get((model, name), '')
            rows.extend(row + (label,) for row in results[model][name].rows(model))
    write_bytes_atomic(path, csv_bytes(CSV_HEADER, rows))


def format_cell(cell):
    if cell is None:
        return '-'
    return f"{cell[0]:.1f}°/{cell[1]:.2f}"


def format_error_table(tables, steps=REPORT_STEPS, strata=(C.STRATUM_OVERALL, C.STRATUM_NEAR)):
    """
    Lays out errors as text: one row per step, one column per model and stratum.

    Args:
        tables (dict): Model name to ErrorTable, in column order.
        steps (tuple): Horizon steps shown as rows.
        strata (tuple): Strata shown per model.

    Returns:
        str: The aligned plain-text table.
    """
    header = [''] + [f"{model} {stratum}" for model in tables for stratum in strata]
    lines = [header]
    for k in steps:
        row = [f"t+{k}"]
        for table in tables.values():
            row.extend(format_cell(table.cell(stratum, k)) for stratum in strata)
        lines.append(row)

    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return '\n'.join(
        ' | '.join(cell.rjust(width) for cell, width in zip(line, widths)).rstrip()
        for line in lines)


def transfer_label(train_balls, eval_balls):
    """Names a transfer experiment, e.g. 2B-on-4B."""
    return f"{train_balls}B-on-{eval_balls}B"


def transfer_labels(trained_balls, datasets):
    """
    Labels the n-ball transfer datasets of every model whose training ball count is known.

    Args:
        trained_balls (dict): Model name to its training ball count or None.
        datasets (list): The evaluated datasets.

    Returns:
        dict: (model, dataset name) to a label such as 2B-on-4B.
    """
    transfer = {family_spec(n).name for n in C.TRANSFER_BALLS}
    return {(model, dataset.spec.name): transfer_label(n, dataset.spec.n_balls)
            for model, n in trained_balls.items() if n is not None
            for dataset in datasets if dataset.spec.name in transfer}
