# (c) 2024 Niels Provos
#
'''
Deterministic 2D Billiards Physics

Balls move in straight lines inside a polygonal table. Within one unit step the
simulator finds the exact time of impact of the earliest ball-ball or ball-wall
contact, advances every ball to that instant, resolves the contact elastically and
continues with the remaining fraction of the step. The simulator is the ground
truth generator for training data and the oracle for planning.

Forces are instantaneous impulses: a force F in Newtons changes the velocity of a
ball by kappa * F, with kappa chosen so that 80K N produce 10 px/step.
'''

import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

import constants as C


class UnknownBall(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class NotInContact(ValueError):
    pass


class InvalidWorld(ValueError):
    pass


class EventOverflow(RuntimeError):
    def __init__(self, step, count):
        super().__init__(f"More than {count} collision events in step {step}")
        self.step = step
        self.count = count


@dataclass(frozen=True, slots=True)
class Vec2:
    x: float
    y: float

    def __add__(self, other):
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other):
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, scale):
        return Vec2(self.x * scale, self.y * scale)

    __rmul__ = __mul__

    def __neg__(self):
        return Vec2(-self.x, -self.y)

    def dot(self, other):
        return self.x * other.x + self.y * other.y

    def cross(self, other):
        return self.x * other.y - self.y * other.x

    def norm(self):
        return math.hypot(self.x, self.y)

    def perp(self):
        return Vec2(-self.y, self.x)

    def is_finite(self):
        return math.isfinite(self.x) and math.isfinite(self.y)

    def as_tuple(self):
        return (self.x, self.y)

    @staticmethod
    def from_polar(angle, magnitude):
        return Vec2(magnitude * math.cos(angle), magnitude * math.sin(angle))


ZERO = Vec2(0.0, 0.0)


def ball_mass(radius):
    """Uniform density: mass grows with the disk area."""
    return C.BALL_MASS * (radius / C.BALL_RADIUS) ** 2


@dataclass(frozen=True)
class Ball:
    id: int
    center: Vec2
    velocity: Vec2 = ZERO
    radius: float = C.BALL_RADIUS
    mass: float = None

    def __post_init__(self):
        if self.mass is None:
            object.__setattr__(self, 'mass', ball_mass(self.radius))
        if not self.radius > 0:
            raise ValueError(f"Ball {self.id} radius must be positive, got {self.radius}")
        if not self.mass > 0:
            raise ValueError(f"Ball {self.id} mass must be positive, got {self.mass}")


def _segments_intersect(a0, a1, b0, b1):
    d1 = (a1 - a0).cross(b0 - a0)
    d2 = (a1 - a0).cross(b1 - a0)
    d3 = (b1 - b0).cross(a0 - b0)
    d4 = (b1 - b0).cross(a1 - b0)
    return (d1 * d2 <= 0) and (d3 * d4 <= 0)


def point_segment_distance(p, p0, p1):
    e = p1 - p0
    length2 = e.dot(e)
    s = 0.0 if length2 == 0 else min(1.0, max(0.0, (p - p0).dot(e) / length2))
    return (p - (p0 + e * s)).norm()


@dataclass(frozen=True)
class Table:
    """A simple closed polygon; the walls are its edges."""
    vertices: tuple

    def __post_init__(self):
        vertices = tuple(Vec2(float(v.x), float(v.y)) if isinstance(v, Vec2)
                         else Vec2(float(v[0]), float(v[1])) for v in self.vertices)
        object.__setattr__(self, 'vertices', vertices)
        if len(vertices) < 3:
            raise ValueError("A table needs at least 3 vertices")
        if abs(self.signed_area) <= 0:
            raise ValueError("Table interior is empty")
        edges = self.edges
        n = len(edges)
        for i in range(n):
            for j in range(i + 1, n):
                # adjacent edges share a vertex
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_intersect(*edges[i], *edges[j]):
                    raise ValueError(f"Table polygon self-intersects at edges {i} and {j}")

    @staticmethod
    def rectangle(width, height, origin=(0.0, 0.0)):
        x, y = origin
        return Table(((x, y), (x + width, y), (x + width, y + height), (x, y + height)))

    @cached_property
    def signed_area(self):
        area = 0.0
        vs = self.vertices
        for i in range(len(vs)):
            area += vs[i].cross(vs[(i + 1) % len(vs)])
        return area / 2.0

    @cached_property
    def edges(self):
        vs = self.vertices
        return tuple((vs[i], vs[(i + 1) % len(vs)]) for i in range(len(vs)))

    @cached_property
    def normals(self):
        """Unit normals of every edge pointing into the table interior."""
        orientation = 1.0 if self.signed_area > 0 else -1.0
        normals = []
        for p0, p1 in self.edges:
            e = p1 - p0
            normals.append(e.perp() * (orientation / e.norm()))
        return tuple(normals)

    @cached_property
    def bounding_box(self):
        xs = [v.x for v in self.vertices]
        ys = [v.y for v in self.vertices]
        return Vec2(min(xs), min(ys)), Vec2(max(xs), max(ys))

    def contains(self, point):
        """Even-odd ray crossing test."""
        inside = False
        vs = self.vertices
        n = len(vs)
        for i in range(n):
            a, b = vs[i], vs[(i + 1) % n]
            if (a.y > point.y) != (b.y > point.y):
                x_cross = a.x + (point.y - a.y) * (b.x - a.x) / (b.y - a.y)
                if point.x < x_cross:
                    inside = not inside
        return inside

    def distance_to_boundary(self, point):
        return min(point_segment_distance(point, p0, p1) for p0, p1 in self.edges)

    def clearance(self, point):
        """Signed distance to the walls: positive inside, negative outside."""
        distance = self.distance_to_boundary(point)
        return distance if self.contains(point) else -distance

    def translated(self, offset):
        return Table(tuple(v + offset for v in self.vertices))

    def mirrored(self):
        return Table(tuple(Vec2(-v.x, v.y) for v in self.vertices))

    def to_list(self):
        return [[v.x, v.y] for v in self.vertices]


@dataclass(frozen=True)
class WorldState:
    balls: tuple
    table: Table
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'balls', tuple(self.balls))
        ids = [b.id for b in self.balls]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Ball ids must be unique, got {ids}")

    @property
    def ball_ids(self):
        return [b.id for b in self.balls]

    def index_of(self, ball_id):
        for i, ball in enumerate(self.balls):
            if ball.id == ball_id:
                return i
        raise UnknownBall(f"Unknown ball id {ball_id}")

    def ball(self, ball_id):
        return self.balls[self.index_of(ball_id)]

    def replace_ball(self, ball):
        index = self.index_of(ball.id)
        balls = list(self.balls)
        balls[index] = ball
        return replace(self, balls=tuple(balls))

    def translated(self, offset):
        balls = tuple(replace(b, center=b.center + offset) for b in self.balls)
        return WorldState(balls, self.table.translated(offset), self.t)

    def mirrored(self):
        """Mirror image about the vertical axis x = 0."""
        balls = tuple(replace(b, center=Vec2(-b.center.x, b.center.y),
                              velocity=Vec2(-b.velocity.x, b.velocity.y)) for b in self.balls)
        return WorldState(balls, self.table.mirrored(), self.t)

    def violations(self, tolerance=C.EPS_CONTACT):
        """Lists containment and overlap violations beyond the tolerance."""
        problems = []
        for b in self.balls:
            if self.table.clearance(b.center) < b.radius - tolerance:
                problems.append(f"ball {b.id} not contained at t={self.t}")
        for i in range(len(self.balls)):
            for j in range(i + 1, len(self.balls)):
                b1, b2 = self.balls[i], self.balls[j]
                if (b1.center - b2.center).norm() < b1.radius + b2.radius - tolerance:
                    problems.append(f"balls {b1.id} and {b2.id} overlap at t={self.t}")
        return problems

    def validate(self, tolerance=C.EPS_PENETRATION):
        problems = self.violations(tolerance)
        if problems:
            raise InvalidWorld('; '.join(problems))

    def kinetic_energy(self):
        return sum(b.mass * b.velocity.dot(b.velocity) for b in self.balls)

    def momentum(self):
        px = sum(b.mass * b.velocity.x for b in self.balls)
        py = sum(b.mass * b.velocity.y for b in self.balls)
        return Vec2(px, py)


class CollisionKind(Enum):
    BALL_WALL = 0
    BALL_BALL = 1


@dataclass(frozen=True)
class CollisionEvent:
    """A contact during step `step`, at time step + toi_fraction.

    For BALL_WALL, a is the ball id and b the edge index; for BALL_BALL both are ball ids.
    """
    step: int
    toi_fraction: float
    kind: CollisionKind
    a: int
    b: int

    def involves(self, ball_id):
        if self.kind == CollisionKind.BALL_WALL:
            return self.a == ball_id
        return ball_id in (self.a, self.b)


@dataclass(frozen=True)
class PhysicsParams:
    restitution: float = C.RESTITUTION
    damping: float = C.DAMPING
    impulse_scale: float = C.IMPULSE_SCALE
    max_events_per_step: int = C.MAX_EVENTS_PER_STEP

    def __post_init__(self):
        if not 0 < self.restitution <= 1:
            raise ValueError(f"restitution must be in (0, 1], got {self.restitution}")
        if not 0 <= self.damping < 1:
            raise ValueError(f"damping must be in [0, 1), got {self.damping}")
        if not self.impulse_scale > 0:
            raise ValueError(f"impulse_scale must be positive, got {self.impulse_scale}")
        if self.max_events_per_step < 1:
            raise ValueError("max_events_per_step must be at least 1")


DEFAULT_PARAMS = PhysicsParams()


def apply_force(state, ball_id, force, params=DEFAULT_PARAMS):
    """
    Applies an instantaneous force to a ball.

    Args:
        state (WorldState): The world.
        ball_id (int): The ball receiving the force.
        force (Vec2): The force in Newtons.
        params (PhysicsParams): Provides the impulse scale kappa.

    Returns:
        WorldState: The world with the ball's velocity incremented by kappa * force.
    """
    if not force.is_finite():
        raise NonFiniteInput(f"Force {force} is not finite")
    ball = state.ball(ball_id)
    velocity = ball.velocity + force * params.impulse_scale
    return state.replace_ball(replace(ball, velocity=velocity))


def _toi_moving_point(p, v, distance, dt):
    """Smallest tau in [0, dt) with |p + tau v| = distance while closing."""
    pv = p.dot(v)
    if pv >= 0:
        return None
    gap = p.dot(p) - distance * distance
    if gap <= 0:
        return 0.0
    a = v.dot(v)
    disc = pv * pv - a * gap
    if disc < 0:
        return None
    tau = gap / (-pv + math.sqrt(disc))
    return tau if tau < dt else None


def toi_circle_circle(b1, b2, dt=1.0):
    """
    Time of impact of two moving balls within a step of length dt.

    Returns:
        float or None: The first contact time, or None if the balls do not touch
        while closing within [0, dt).
    """
    return _toi_moving_point(b2.center - b1.center, b2.velocity - b1.velocity,
                             b1.radius + b2.radius, dt)


def _toi_wall(center, velocity, radius, edge, normal, dt):
    p0, p1 = edge
    best, best_normal = None, None

    vn = velocity.dot(normal)
    if vn < 0:
        gap = (center - p0).dot(normal) - radius
        # a ball behind the wall line belongs to another part of a concave table
        if gap >= -C.EPS_CONTACT:
            tau = max(gap, 0.0) / -vn
            if tau < dt:
                e = p1 - p0
                s = (center + velocity * tau - p0).dot(e) / e.dot(e)
                if 0.0 <= s <= 1.0:
                    best, best_normal = tau, normal

    for corner in (p0, p1):
        tau = _toi_moving_point(center - corner, velocity, radius, dt)
        if tau is not None and (best is None or tau < best):
            contact = center + velocity * tau - corner
            best, best_normal = tau, contact * (1.0 / contact.norm())

    return best, best_normal


def toi_circle_segment(ball, edge, dt=1.0, normal=None):
    """
    Time of impact of a ball with a wall segment, including its end points.

    Args:
        ball (Ball): The moving ball.
        edge (tuple): The wall as a pair of Vec2 end points.
        dt (float): Length of the time window.
        normal (Vec2, optional): The unit normal pointing to the playing side. When
            omitted, the side holding the ball's center is used.

    Returns:
        float or None: The contact time in [0, dt), or None.
    """
    p0, p1 = edge
    if normal is None:
        e = p1 - p0
        normal = e.perp() * (1.0 / e.norm())
        if (ball.center - p0).dot(normal) < 0:
            normal = -normal
    tau, _ = _toi_wall(ball.center, ball.velocity, ball.radius, edge, normal, dt)
    return tau


def _ball_ball_velocities(c1, v1, m1, c2, v2, m2, restitution):
    delta = c2 - c1
    n = delta * (1.0 / delta.norm())
    closing = (v1 - v2).dot(n)
    if closing <= 0:
        return None
    impulse = (1.0 + restitution) * m1 * m2 / (m1 + m2) * closing
    return v1 - n * (impulse / m1), v2 + n * (impulse / m2)


def resolve_ball_ball(b1, b2, restitution=C.RESTITUTION):
    """
    Resolves a contact between two balls along the line of centers.

    Returns:
        tuple: The two balls with updated velocities.

    Raises:
        NotInContact: If the balls are not touching or not closing.
    """
    distance = (b2.center - b1.center).norm()
    if abs(distance - (b1.radius + b2.radius)) > C.EPS_CONTACT:
        raise NotInContact(f"Balls {b1.id} and {b2.id} are {distance} apart")
    result = _ball_ball_velocities(b1.center, b1.velocity, b1.mass,
                                   b2.center, b2.velocity, b2.mass, restitution)
    if result is None:
        raise NotInContact(f"Balls {b1.id} and {b2.id} are not closing")
    return replace(b1, velocity=result[0]), replace(b2, velocity=result[1])


def _reflect(velocity, normal, restitution):
    vn = velocity.dot(normal)
    if vn >= 0:
        return None
    return velocity - normal * ((1.0 + restitution) * vn)


def resolve_ball_wall(ball, edge_normal, restitution=C.RESTITUTION):
    """Reflects the normal velocity component of a ball hitting a wall."""
    velocity = _reflect(ball.velocity, edge_normal, restitution)
    if velocity is None:
        raise NotInContact(f"Ball {ball.id} is not approaching the wall")
    return replace(ball, velocity=velocity)


def _next_event(centers, velocities, radii, table, remaining):
    candidates = []
    n = len(centers)
    for i in range(n):
        for k, (edge, normal) in enumerate(zip(table.edges, table.normals)):
            tau, contact_normal = _toi_wall(centers[i], velocities[i], radii[i],
                                            edge, normal, remaining)
            if tau is not None:
                candidates.append((tau, CollisionKind.BALL_WALL, i, k, contact_normal))
    for i in range(n):
        for j in range(i + 1, n):
            tau = _toi_moving_point(centers[j] - centers[i], velocities[j] - velocities[i],
                                    radii[i] + radii[j], remaining)
            if tau is not None:
                candidates.append((tau, CollisionKind.BALL_BALL, i, j, None))
    if not candidates:
        return None

    earliest = min(c[0] for c in candidates)
    ties = [c for c in candidates if c[0] <= earliest + C.EPS_TIE]
    return min(ties, key=lambda c: (c[1].value, c[2], c[3]))


def step(state, params=DEFAULT_PARAMS):
    """
    Advances the world by exactly one unit step.

    Args:
        state (WorldState): The current world.
        params (PhysicsParams): Restitution, damping and the event budget.

    Returns:
        tuple: (WorldState at t + 1, list of CollisionEvent in chronological order)

    Raises:
        EventOverflow: If the step needs more than max_events_per_step contacts.
    """
    balls = state.balls
    table = state.table
    centers = [b.center for b in balls]
    velocities = [b.velocity for b in balls]
    radii = [b.radius for b in balls]
    masses = [b.mass for b in balls]

    events = []
    elapsed = 0.0
    while True:
        remaining = 1.0 - elapsed
        event = _next_event(centers, velocities, radii, table, remaining)
        if event is None:
            centers = [c + v * remaining for c, v in zip(centers, velocities)]
            break

        tau, kind, a, b, normal = event
        centers = [c + v * tau for c, v in zip(centers, velocities)]
        elapsed = min(elapsed + tau, math.nextafter(1.0, 0.0))

        if kind == CollisionKind.BALL_WALL:
            reflected = _reflect(velocities[a], normal, params.restitution)
            assert reflected is not None, "wall contact without approach"
            velocities[a] = reflected
            events.append(CollisionEvent(state.t, elapsed, kind, balls[a].id, b))
        else:
            resolved = _ball_ball_velocities(centers[a], velocities[a], masses[a],
                                             centers[b], velocities[b], masses[b],
                                             params.restitution)
            assert resolved is not None, "ball contact without closing speed"
            velocities[a], velocities[b] = resolved
            events.append(CollisionEvent(state.t, elapsed, kind, balls[a].id, balls[b].id))

        if len(events) > params.max_events_per_step:
            raise EventOverflow(state.t, params.max_events_per_step)

    if params.damping > 0:
        velocities = [v * (1.0 - params.damping) for v in velocities]

    new_balls = tuple(replace(b, center=c, velocity=v)
                      for b, c, v in zip(balls, centers, velocities))
    return WorldState(new_balls, table, state.t + 1), events


@dataclass
class Trajectory:
    """Time indexed world states; states[0] already carries the applied forces."""
    states: list
    events: list = field(default_factory=list)
    forces: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    @property
    def table(self):
        return self.states[0].table

    @property
    def ball_ids(self):
        return self.states[0].ball_ids

    def centers(self, ball_id):
        index = self.states[0].index_of(ball_id)
        return np.array([s.balls[index].center.as_tuple() for s in self.states])

    def displacements(self, ball_id):
        """Per-step velocities u_t = c_t - c_{t-1} for t = 1 .. len - 1."""
        index = self.states[0].index_of(ball_id)
        result = np.empty((len(self.states) - 1, 2))
        for t in range(1, len(self.states)):
            u = self.states[t].balls[index].center - self.states[t - 1].balls[index].center
            result[t - 1] = (u.x, u.y)
        return result

    def future_velocities(self, ball_id, t, horizon):
        """
        Ground-truth velocities u_{t+1} .. u_{t+horizon} with a validity mask.

        Returns:
            tuple: (targets of shape [horizon, 2], mask of shape [horizon])
        """
        displacements = self.displacements(ball_id)
        targets = np.zeros((horizon, 2))
        mask = np.zeros(horizon)
        available = min(horizon, len(self.states) - 1 - t)
        if available > 0:
            targets[:available] = displacements[t:t + available]
            mask[:available] = 1.0
        return targets, mask


def simulate(state, forces, T, params=DEFAULT_PARAMS):
    """
    Applies forces once and steps the world T times.

    Args:
        state (WorldState): The initial world.
        forces (dict): Maps ball id to a force Vec2 applied at t = 0.
        T (int): Number of steps, at least 1.
        params (PhysicsParams): Simulation parameters.

    Returns:
        Trajectory: T + 1 states and every collision event.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if state.t == 0:
        # later states may carry contact round-off
        state.validate()
    current = state
    for ball_id in sorted(forces):
        current = apply_force(current, ball_id, forces[ball_id], params)

    states = [current]
    events = []
    for _ in range(T):
        current, step_events = step(current, params)
        states.append(current)
        events.extend(step_events)
    return Trajectory(states, events, dict(forces))


_HEADER = struct.Struct('<5sIId')
_EVENT = struct.Struct('<IBIId')
_COUNT = struct.Struct('<I')


def trajectory_to_bytes(traj):
    """
    Encodes a trajectory in the BLRD1 little-endian layout: magic, header
    (n_balls, T, radius), per-frame per-ball (cx, cy, vx, vy), event count and events.
    """
    first = traj.states[0]
    radius = first.balls[0].radius if first.balls else C.BALL_RADIUS
    header = _HEADER.pack(C.TRAJECTORY_MAGIC, len(first.balls), len(traj.states) - 1, radius)
    frames = np.array([[(b.center.x, b.center.y, b.velocity.x, b.velocity.y) for b in s.balls]
                       for s in traj.states], dtype='<f8')
    events = [_COUNT.pack(len(traj.events))]
    for e in traj.events:
        events.append(_EVENT.pack(e.step, e.kind.value, e.a, e.b, e.toi_fraction))
    return header + frames.tobytes() + b''.join(events)


def trajectory_from_bytes(data, table, ball_ids=None, forces=None):
    """Decodes BLRD1 bytes; the table and ball ids are not part of the format."""
    magic, n_balls, steps, radius = _HEADER.unpack_from(data, 0)
    if magic != C.TRAJECTORY_MAGIC:
        raise ValueError(f"Not a BLRD1 trajectory: {magic!r}")
    if ball_ids is None:
        ball_ids = list(range(n_balls))
    offset = _HEADER.size
    count = (steps + 1) * n_balls * 4
    frames = np.frombuffer(data, dtype='<f8', count=count, offset=offset)
    frames = frames.reshape(steps + 1, n_balls, 4)
    offset += frames.nbytes

    states = []
    for t in range(steps + 1):
        balls = tuple(Ball(ball_ids[i], Vec2(float(row[0]), float(row[1])),
                           Vec2(float(row[2]), float(row[3])), radius)
                      for i, row in enumerate(frames[t]))
        states.append(WorldState(balls, table, t))

    (n_events,) = _COUNT.unpack_from(data, offset)
    offset += _COUNT.size
    events = []
    for _ in range(n_events):
        step_index, kind, a, b, toi = _EVENT.unpack_from(data, offset)
        offset += _EVENT.size
        events.append(CollisionEvent(step_index, toi, CollisionKind(kind), a, b))
    return Trajectory(states, events, dict(forces or {}))


def save_trajectory(traj, path):
    Path(path).write_bytes(trajectory_to_bytes(traj))


def load_trajectory(path, table, ball_ids=None, forces=None):
    return trajectory_from_bytes(Path(path).read_bytes(), table, ball_ids, forces)
