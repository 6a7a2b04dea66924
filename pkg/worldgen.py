# (c) 2024 Niels Provos
#
# Seeded sampling of billiards worlds and force schedules, and generation of
# datasets of simulated trajectories.
#

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import constants as C
from physics_core import (
    Ball, PhysicsParams, Table, Vec2, WorldState, load_trajectory, save_trajectory, simulate
)
from utils import canonical_json, load_json, make_rng, split_seed, timeit


class WorldSpecError(ValueError):
    pass


class PlacementFailure(RuntimeError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"Sequence {index}: {message}")
        self.index = index


# Unit-size polygon templates, scaled by a sampled length
TEMPLATES = {
    'rectangle': ((0.0, 0.0), (1.0, 0.0), (1.0, 0.7), (0.0, 0.7)),
    'right_trapezoid': ((0.0, 0.0), (1.0, 0.0), (0.6, 0.8), (0.0, 0.8)),
    'hexagon': tuple((0.5 + 0.5 * math.cos(k * math.pi / 3), 0.5 + 0.5 * math.sin(k * math.pi / 3))
                     for k in range(6)),
    'l_shape': ((0.0, 0.0), (1.0, 0.0), (1.0, 0.45), (0.45, 0.45), (0.45, 1.0), (0.0, 1.0)),
}


def _check_range(name, value):
    lo, hi = value
    if not (0 < lo <= hi) or not math.isfinite(hi):
        raise WorldSpecError(f"{name} must be a nonempty positive range, got {value}")


@dataclass(frozen=True)
class Rectangular:
    length_range: tuple = C.TRAIN_LENGTH_RANGE

    def __post_init__(self):
        object.__setattr__(self, 'length_range', tuple(self.length_range))
        _check_range('length_range', self.length_range)

    def sample(self, rng):
        width = float(rng.uniform(*self.length_range))
        height = float(rng.uniform(*self.length_range))
        return Table.rectangle(width, height)


@dataclass(frozen=True)
class PolygonFamily:
    templates: tuple = tuple(TEMPLATES)
    scale_range: tuple = C.TRAIN_LENGTH_RANGE

    def __post_init__(self):
        object.__setattr__(self, 'templates', tuple(self.templates))
        object.__setattr__(self, 'scale_range', tuple(self.scale_range))
        if not self.templates:
            raise WorldSpecError("PolygonFamily needs at least one template")
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown:
            raise WorldSpecError(f"Unknown table templates {unknown}")
        _check_range('scale_range', self.scale_range)

    def sample(self, rng):
        name = self.templates[int(rng.integers(len(self.templates)))]
        scale = float(rng.uniform(*self.scale_range))
        return Table(tuple((x * scale, y * scale) for x, y in TEMPLATES[name]))


@dataclass(frozen=True)
class WorldSpec:
    n_balls: int = 1
    geometry: object = field(default_factory=Rectangular)
    force_mag_range: tuple = (C.FORCE_MIN, C.FORCE_MAX)
    seq_len_range: tuple = C.SEQ_LEN_RANGE
    ball_radius: float = C.BALL_RADIUS
    glimpse_size: int = C.GLIMPSE_SIZE
    name: str = 'train'

    def __post_init__(self):
        object.__setattr__(self, 'force_mag_range', tuple(self.force_mag_range))
        object.__setattr__(self, 'seq_len_range', tuple(self.seq_len_range))
        if self.n_balls < 1:
            raise WorldSpecError(f"n_balls must be at least 1, got {self.n_balls}")
        if not isinstance(self.geometry, (Rectangular, PolygonFamily)):
            raise WorldSpecError(f"Unsupported geometry {self.geometry!r}")
        _check_range('force_mag_range', self.force_mag_range)
        _check_range('seq_len_range', self.seq_len_range)
        if self.seq_len_range[0] < 2:
            raise WorldSpecError("Sequences need at least 2 frames")
        if not self.ball_radius > 0:
            raise WorldSpecError(f"ball_radius must be positive, got {self.ball_radius}")
        if self.glimpse_size < 8:
            raise WorldSpecError(f"glimpse_size must be at least 8, got {self.glimpse_size}")

    def to_dict(self):
        data = asdict(self)
        data['geometry']['kind'] = type(self.geometry).__name__
        return data

    @staticmethod
    def from_dict(data):
        data = dict(data)
        geometry = dict(data.pop('geometry', {}))
        kind = geometry.pop('kind', 'Rectangular')
        if kind == 'Rectangular':
            data['geometry'] = Rectangular(**geometry)
        elif kind == 'PolygonFamily':
            data['geometry'] = PolygonFamily(**geometry)
        else:
            raise WorldSpecError(f"Unknown geometry kind {kind}")
        return WorldSpec(**data)


@dataclass
class Sequence:
    trajectory: object
    forces_at_t0: dict
    spec_used: WorldSpec
    seed: int
    index: int = 0


@dataclass
class Dataset:
    sequences: list
    spec: WorldSpec
    seed: int

    def __len__(self):
        return len(self.sequences)

    def manifest(self):
        entries = []
        for seq in self.sequences:
            traj = seq.trajectory
            first = traj.states[0]
            entries.append({
                'index': seq.index,
                'seed': seq.seed,
                'file': sequence_filename(seq.index),
                'n_frames': len(traj),
                'n_events': len(traj.events),
                'table': first.table.to_list(),
                'ball_ids': first.ball_ids,
                'radius': first.balls[0].radius,
                'forces': [[bid, f.x, f.y] for bid, f in sorted(seq.forces_at_t0.items())],
            })
        return {
            'format': C.TRAJECTORY_MAGIC.decode('ascii'),
            'seed': self.seed,
            'n_sequences': len(self.sequences),
            'spec': self.spec.to_dict(),
            'sequences': entries,
        }


def sequence_filename(index):
    return f"seq_{index:06}.blrd"


def sample_force(rng, force_mag_range=(C.FORCE_MIN, C.FORCE_MAX)):
    """Uniform direction on [0, 2pi), uniform magnitude in the range."""
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    magnitude = float(rng.uniform(*force_mag_range))
    return Vec2.from_polar(angle, magnitude)


def place_balls(table, n_balls, radius, rng, max_tries=C.MAX_PLACEMENT_TRIES):
    """
    Places balls uniformly at non-overlapping positions at least one radius from the walls.

    Raises:
        PlacementFailure: If more than max_tries candidate positions are rejected.
    """
    lo, hi = table.bounding_box
    centers = []
    rejections = 0
    while len(centers) < n_balls:
        candidate = Vec2(float(rng.uniform(lo.x, hi.x)), float(rng.uniform(lo.y, hi.y)))
        if (table.clearance(candidate) >= radius and
                all((candidate - c).norm() >= 2 * radius for c in centers)):
            centers.append(candidate)
            continue
        rejections += 1
        if rejections > max_tries:
            raise PlacementFailure(
                f"Could not place {n_balls} balls after {max_tries} rejections")
    return [Ball(i, c, Vec2(0.0, 0.0), radius) for i, c in enumerate(centers)]


def sample_world(spec, seed):
    """
    Samples a table, ball positions and the forces applied at t = 0.

    Args:
        spec (WorldSpec): The world family.
        seed (int): Seed of the world; equal seeds give equal worlds.

    Returns:
        tuple: (WorldState, dict mapping ball id to force Vec2)
    """
    rng = make_rng(seed)
    table = spec.geometry.sample(rng)
    balls = place_balls(table, spec.n_balls, spec.ball_radius, rng)
    forces = {ball.id: sample_force(rng, spec.force_mag_range) for ball in balls}
    return WorldState(tuple(balls), table, 0), forces


def sample_length(spec, seed):
    lo, hi = spec.seq_len_range
    return int(make_rng(seed, 1).integers(lo, hi + 1))


@timeit
def generate_dataset(spec, n_sequences, seed, params=None, progress_callback=None):
    """
    Generates simulated sequences from per-sequence seeds split from a master seed.

    Args:
        spec (WorldSpec): The world family.
        n_sequences (int): Number of sequences, at least 1.
        seed (int): The master seed.
        params (PhysicsParams, optional): Simulation parameters.
        progress_callback (callable, optional): Called with (done, total).

    Returns:
        Dataset: The generated sequences.
    """
    if n_sequences < 1:
        raise WorldSpecError(f"n_sequences must be at least 1, got {n_sequences}")
    params = params or PhysicsParams()

    sequences = []
    for index in range(n_sequences):
        child = split_seed(seed, index)
        try:
            state, forces = sample_world(spec, child)
        except PlacementFailure as e:
            raise PlacementFailure(str(e), index=index) from e
        traj = simulate(state, forces, sample_length(spec, child) - 1, params)
        sequences.append(Sequence(traj, forces, spec, child, index))
        if progress_callback:
            progress_callback(index + 1, n_sequences)
    return Dataset(sequences, spec, seed)


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for seq in dataset.sequences:
        save_trajectory(seq.trajectory, directory / sequence_filename(seq.index))
    (directory / C.MANIFEST_FILE).write_bytes(canonical_json(dataset.manifest()))
    print(f"Saved {len(dataset)} sequences to {directory}")


def load_dataset(directory):
    directory = Path(directory)
    manifest = load_json((directory / C.MANIFEST_FILE).read_bytes())
    spec = WorldSpec.from_dict(manifest['spec'])
    sequences = []
    for entry in manifest['sequences']:
        table = Table(tuple(tuple(v) for v in entry['table']))
        forces = {int(bid): Vec2(fx, fy) for bid, fx, fy in entry['forces']}
        traj = load_trajectory(directory / entry['file'], table, entry['ball_ids'], forces)
        sequences.append(Sequence(traj, forces, spec, entry['seed'], entry['index']))
    if len(sequences) != manifest['n_sequences']:
        raise ValueError(f"Manifest lists {manifest['n_sequences']} sequences, "
                         f"found {len(sequences)}")
    return Dataset(sequences, spec, manifest['seed'])


def family_spec(n_balls, name=None):
    """The train distribution with a given number of balls."""
    return WorldSpec(n_balls=n_balls, name=name or f"{n_balls}-balls")


def test_spec_variants():
    """Named evaluation worlds: train, large walls, n-ball transfer and non-rectangular."""
    return [
        WorldSpec(name='train'),
        WorldSpec(geometry=Rectangular(C.LARGE_LENGTH_RANGE), name='large-walls'),
        *(family_spec(n) for n in C.TRANSFER_BALLS),
        WorldSpec(geometry=PolygonFamily(), name='non-rectangular'),
    ]


def variant_by_name(name):
    for spec in test_spec_variants():
        if spec.name == name:
            return spec
    names = [spec.name for spec in test_spec_variants()]
    raise WorldSpecError(f"Unknown dataset variant {name}, choose from {names}")


def held_out_seed(seed, variant_index):
    """Master seed of an evaluation dataset, disjoint from the training seeds."""
    return split_seed(seed + C.EVAL_SEED_OFFSET, variant_index)
