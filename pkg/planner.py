# (c) 2024 Niels Provos
#
'''
Planning Shots by Imagination

The planner searches the force applied to a cue ball with CMA-ES. Every candidate
force is scored by imagining the resulting rollout with a predictor and measuring how
close it comes to the goal. The best force is then executed in the simulator, which
decides whether the plan actually worked.

Usage:
    result = plan(state, PushToLocation(0, Vec2(300, 200)), OraclePredictor(), CmaConfig())
    print(result.executed_min_distance)
'''

import math
from dataclasses import dataclass, field, replace

import numpy as np

import constants as C
from imagination import imagine
from physics_core import (
    DEFAULT_PARAMS, CollisionKind, UnknownBall, Vec2, simulate
)
from predictors import OraclePredictor
from utils import csv_bytes, format_float, make_rng, split_seed, timeit, write_bytes_atomic
from worldgen import WorldSpec, sample_force, sample_world


class InvalidGoal(ValueError):
    pass


class EmptyResults(ValueError):
    pass


@dataclass(frozen=True)
class PushToLocation:
    cue_id: int
    target: Vec2
    kind = C.GOAL_PUSH


@dataclass(frozen=True)
class HitBall:
    cue_id: int
    target_ball_id: int
    kind = C.GOAL_HIT


def validate_goal(state, goal):
    if goal.cue_id not in state.ball_ids:
        raise InvalidGoal(f"Cue ball {goal.cue_id} is not in the world")
    if isinstance(goal, PushToLocation):
        if not state.table.contains(goal.target):
            raise InvalidGoal(f"Target {goal.target.as_tuple()} lies outside the table")
    elif isinstance(goal, HitBall):
        if goal.target_ball_id not in state.ball_ids:
            raise InvalidGoal(f"Target ball {goal.target_ball_id} is not in the world")
        if goal.target_ball_id == goal.cue_id:
            raise InvalidGoal("The cue ball cannot hit itself")
    else:
        raise InvalidGoal(f"Unsupported goal {goal!r}")


def _contact(events, a, b):
    return any(e.kind == CollisionKind.BALL_BALL and {e.a, e.b} == {a, b} for e in events)


def goal_cost(traj, goal):
    """
    Distance in px by which a trajectory misses the goal; 0 iff the goal is met.

    Args:
        traj (Trajectory or ImaginedTrajectory): States to score; collision events are
            used when the trajectory has them.
        goal (PushToLocation or HitBall): The goal.

    Returns:
        float: Minimum over time of the cue-target distance, or of the gap between the
            two balls' surfaces for HitBall.
    """
    if not isinstance(goal, (PushToLocation, HitBall)):
        raise InvalidGoal(f"Unsupported goal {goal!r}")
    first = traj.states[0]
    try:
        cue = first.index_of(goal.cue_id)
        other = first.index_of(goal.target_ball_id) if isinstance(goal, HitBall) else None
    except UnknownBall as e:
        raise InvalidGoal(str(e)) from e

    if other is None:
        centers = np.array([s.balls[cue].center.as_tuple() for s in traj.states])
        return float(np.min(np.hypot(*(centers - goal.target.as_tuple()).T)))
    if _contact(getattr(traj, 'events', ()), goal.cue_id, goal.target_ball_id):
        return 0.0
    gaps = [(s.balls[cue].center - s.balls[other].center).norm()
            - s.balls[cue].radius - s.balls[other].radius for s in traj.states]
    return max(0.0, float(min(gaps)))


@dataclass(frozen=True)
class CmaConfig:
    popsize: int = None
    sigma0: float = 0.3
    max_evals: int = 180
    seed: int = 0
    parameterization: str = C.PARAM_POLAR
    start: str = 'fixed'

    def __post_init__(self):
        if self.popsize is not None and self.popsize < 4:
            raise ValueError(f"popsize must be at least 4, got {self.popsize}")
        if self.max_evals < self.population:
            raise ValueError(f"max_evals {self.max_evals} is below one generation "
                             f"of {self.population}")
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if self.parameterization not in (C.PARAM_POLAR, C.PARAM_CARTESIAN):
            raise ValueError(f"Unknown parameterization {self.parameterization}")
        if self.start not in ('fixed', 'aim'):
            raise ValueError(f"start must be 'fixed' or 'aim', got {self.start}")

    @property
    def population(self):
        return self.popsize or 4 + int(3 * math.log(2))


class CMAES:
    """
    (mu/mu_w, lambda) CMA-ES with cumulative step-size adaptation and rank-one plus
    rank-mu covariance updates, in the ask/tell style.
    """

    def __init__(self, xstart, sigma, popsize=None, rng=None):
        self.xmean = np.array(xstart, dtype=np.float64)
        n = len(self.xmean)
        self.dimension = n
        self.lam = popsize or 4 + int(3 * math.log(n))
        self.mu = self.lam // 2
        raw = math.log(self.lam / 2 + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = raw / raw.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1,
                       2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 2 * self.mueff / self.lam + 0.3 + self.cs

        self.sigma = float(sigma)
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.counteval = 0
        self.rng = rng or np.random.default_rng(0)
        self._decompose()

    def _decompose(self):
        self.C = (self.C + self.C.T) / 2.0
        eigenvalues, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(eigenvalues, 1e-300))
        self.invsqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T

    def ask(self):
        """lambda samples of m + sigma * B D N(0, I), one per row."""
        z = self.rng.standard_normal((self.lam, self.dimension))
        return self.xmean + self.sigma * (z * self.D) @ self.B.T

    def tell(self, arx, fitvals):
        self.counteval += len(fitvals)
        n = self.dimension
        order = np.argsort(np.asarray(fitvals), kind='stable')
        arx = np.asarray(arx)[order]
        xold = self.xmean
        self.xmean = self.weights @ arx[:self.mu]

        y = self.xmean - xold
        self.ps = ((1 - self.cs) * self.ps
                   + math.sqrt(self.cs * (2 - self.cs) * self.mueff) / self.sigma
                   * (self.invsqrt @ y))
        # no rank-one accumulation while sigma increases quickly
        hsig = float(np.sum(self.ps ** 2) / n
                     / (1 - (1 - self.cs) ** (2 * self.counteval / self.lam))
                     < 2 + 4.0 / (n + 1))
        self.pc = ((1 - self.cc) * self.pc
                   + math.sqrt(self.cc * (2 - self.cc) * self.mueff) / self.sigma * hsig * y)

        c1a = self.c1 * (1 - (1 - hsig ** 2) * self.cc * (2 - self.cc))
        dx = arx[:self.mu] - xold
        self.C = ((1 - c1a - self.cmu * self.weights.sum()) * self.C
                  + self.c1 * np.outer(self.pc, self.pc)
                  + self.cmu / self.sigma ** 2 * (dx.T * self.weights) @ dx)

        self.sigma *= math.exp(min(1.0, self.cs / self.damps
                                   * (np.sum(self.ps ** 2) / n - 1) / 2))
        self._decompose()

    def converged(self, tolx=1e-12):
        return self.sigma * self.D.max() < tolx


@dataclass
class CmaResult:
    x: np.ndarray
    value: float
    evals: int
    budget_exhausted: bool
    history: list = field(default_factory=list)


def cma_es(objective, cfg, xstart=(0.0, 0.0)):
    """
    Minimizes an objective over R^2 with CMA-ES.

    The start point is evaluated first; afterwards only whole generations are
    evaluated, so at most cfg.max_evals evaluations are used.

    Args:
        objective (callable): Maps a numpy vector to a finite float.
        cfg (CmaConfig): Population, step size, budget and seed.
        xstart (sequence): Initial mean.

    Returns:
        CmaResult: Best point, its value, evaluations used, whether the budget ran out,
            and the best-so-far value after the start point and after each generation.
    """
    es = CMAES(xstart, cfg.sigma0, cfg.population, make_rng(cfg.seed))
    best_x = np.array(xstart, dtype=np.float64)
    best_value = float(objective(best_x))
    evals = 1
    history = [best_value]

    while evals + es.lam <= cfg.max_evals and not es.converged():
        candidates = es.ask()
        values = [float(objective(x)) for x in candidates]
        evals += len(values)
        es.tell(candidates, values)
        index = int(np.argmin(values))
        if values[index] < best_value:
            best_x, best_value = candidates[index].copy(), values[index]
        history.append(best_value)

    return CmaResult(best_x, best_value, evals, evals + es.lam > cfg.max_evals, history)


@dataclass(frozen=True)
class ForceMapping:
    """Maps unconstrained CMA-ES coordinates to a force in the allowed range."""
    parameterization: str = C.PARAM_POLAR
    force_range: tuple = (C.FORCE_MIN, C.FORCE_MAX)

    def force(self, x):
        lo, hi = self.force_range
        if self.parameterization == C.PARAM_POLAR:
            angle = (2.0 * math.pi * float(x[0])) % (2.0 * math.pi)
            magnitude = min(hi, max(lo, lo + (hi - lo) * float(x[1])))
            return Vec2.from_polar(angle, magnitude)
        force = Vec2(hi * float(x[0]), hi * float(x[1]))
        norm = force.norm()
        if norm == 0.0:
            return Vec2(lo, 0.0)
        return force * (min(hi, max(lo, norm)) / norm)

    def start(self, angle):
        """Coordinates of a force at the given angle with mid-range magnitude."""
        lo, hi = self.force_range
        if self.parameterization == C.PARAM_POLAR:
            return np.array([(angle / (2.0 * math.pi)) % 1.0, 0.5])
        magnitude = (lo + hi) / 2.0 / hi
        return np.array([magnitude * math.cos(angle), magnitude * math.sin(angle)])


def aim_angle(state, goal):
    cue = state.ball(goal.cue_id).center
    if isinstance(goal, PushToLocation):
        target = goal.target
    else:
        target = state.ball(goal.target_ball_id).center
    return math.atan2(target.y - cue.y, target.x - cue.x)


@dataclass
class PlanResult:
    force: Vec2
    imagined_cost: float
    executed_min_distance: float
    hit: dict
    contact: bool = False
    evals: int = 0
    budget_exhausted: bool = False


def execute(state, goal, force, T=C.PLAN_ROLLOUT_STEPS, params=DEFAULT_PARAMS,
            imagined_cost=None, evals=0, budget_exhausted=False):
    """Applies the force in the simulator and scores the actual outcome."""
    traj = simulate(state, {goal.cue_id: force}, T, params)
    distance = goal_cost(traj, goal)
    contact = False
    if isinstance(goal, HitBall):
        # a near miss is not a hit
        contact = _contact(traj.events, goal.cue_id, goal.target_ball_id)
        hit = {p: contact for p in C.HIT_THRESHOLDS}
    else:
        hit = {p: distance < p for p in C.HIT_THRESHOLDS}
    return PlanResult(force, imagined_cost, distance, hit, contact, evals, budget_exhausted)


def plan(state, goal, predictor, cfg, T=C.PLAN_ROLLOUT_STEPS, params=DEFAULT_PARAMS):
    """
    Searches the cue force whose imagined rollout best meets the goal and executes it.

    Args:
        state (WorldState): The world before the shot.
        goal (PushToLocation or HitBall): What the shot should achieve.
        predictor (Predictor): Drives the imagined rollouts.
        cfg (CmaConfig): Search settings.
        T (int): Rollout length for imagination and execution.
        params (PhysicsParams): Simulation parameters.

    Returns:
        PlanResult: The chosen force with its imagined and executed costs.
    """
    validate_goal(state, goal)
    mapping = ForceMapping(cfg.parameterization)
    start = mapping.start(aim_angle(state, goal) if cfg.start == 'aim' else 0.0)

    def objective(x):
        imagined = imagine(state, {goal.cue_id: mapping.force(x)}, predictor, T, params=params)
        return goal_cost(imagined, goal)

    result = cma_es(objective, cfg, start)
    return execute(state, goal, mapping.force(result.x), T, params, result.value,
                   result.evals, result.budget_exhausted)


def random_plan(state, goal, rng, T=C.PLAN_ROLLOUT_STEPS, params=DEFAULT_PARAMS,
                force_range=(C.FORCE_MIN, C.FORCE_MAX)):
    """Executes one force drawn like the training forces."""
    validate_goal(state, goal)
    return execute(state, goal, sample_force(rng, force_range), T, params)


def hit_accuracy(results, thresholds=C.HIT_THRESHOLDS):
    """Fraction of results that hit at each threshold."""
    if not results:
        raise EmptyResults("hit_accuracy needs at least one result")
    return {p: sum(bool(r.hit[p]) for r in results) / len(results) for p in thresholds}


@dataclass(frozen=True)
class Trial:
    seed: int
    state: object
    goal: object


def sample_target(state, rng, min_distance=C.MIN_TARGET_DISTANCE,
                  max_tries=C.MAX_PLACEMENT_TRIES):
    """A point at least one radius inside the walls and min_distance from the cue."""
    cue = state.balls[0]
    lo, hi = state.table.bounding_box
    for _ in range(max_tries):
        candidate = Vec2(float(rng.uniform(lo.x, hi.x)), float(rng.uniform(lo.y, hi.y)))
        if (state.table.clearance(candidate) >= cue.radius
                and (candidate - cue.center).norm() >= min_distance):
            return candidate
    raise InvalidGoal(f"No target found after {max_tries} tries")


def sample_trials(n, seed, goal_kind=C.GOAL_PUSH, spec=None):
    """
    The benchmark protocol: train-distribution worlds with resting balls.

    PushToLocation trials use 1-ball worlds and a uniform target; HitBall trials use
    2-ball worlds and ask ball 0 to hit ball 1.
    """
    if goal_kind == C.GOAL_PUSH:
        spec = spec or WorldSpec(n_balls=1)
    elif goal_kind == C.GOAL_HIT:
        spec = spec or WorldSpec(n_balls=2)
    else:
        raise InvalidGoal(f"Unknown goal kind {goal_kind}")
    trials = []
    for index in range(n):
        child = split_seed(seed, index)
        state, _ = sample_world(spec, child)
        if goal_kind == C.GOAL_PUSH:
            goal = PushToLocation(0, sample_target(state, make_rng(child, 2)))
        else:
            goal = HitBall(0, 1)
        trials.append(Trial(child, state, goal))
    return trials


REPORT_HEADER = ('seed', 'goal', 'target_x', 'target_y', 'fx', 'fy', 'imagined_cost',
                 'executed_min_distance') + tuple(f'hit@{p}' for p in C.HIT_THRESHOLDS)


def report_rows(trials, results):
    rows = []
    for trial, result in zip(trials, results):
        goal = trial.goal
        if isinstance(goal, PushToLocation):
            target = goal.target
        else:
            target = trial.state.ball(goal.target_ball_id).center
        rows.append((trial.seed, goal.kind, format_float(target.x), format_float(target.y),
                     format_float(result.force.x), format_float(result.force.y),
                     format_float(result.imagined_cost), format_float(result.executed_min_distance))
                    + tuple(int(result.hit[p]) for p in C.HIT_THRESHOLDS))
    return rows


@timeit
def run_benchmark(trials, model, predictor=None, cfg=None, T=C.PLAN_ROLLOUT_STEPS,
                  out_csv=None, progress_callback=None):
    """
    Plans every trial with one model and optionally writes the per-trial CSV.

    Args:
        trials (list): From sample_trials.
        model (str): 'random', 'oracle' or the name of the given predictor.
        predictor (Predictor, optional): Needed for models other than random and oracle.
        cfg (CmaConfig, optional): Search settings; each trial reseeds it.
        T (int): Rollout length.
        out_csv (str or Path, optional): Report destination.
        progress_callback (callable, optional): Called with (done, total).

    Returns:
        list: PlanResult per trial.
    """
    cfg = cfg or CmaConfig()
    if model == C.MODEL_ORACLE and predictor is None:
        # planning only consumes the next step
        predictor = OraclePredictor(horizon=1)
    if model != C.MODEL_RANDOM and predictor is None:
        raise ValueError(f"Model {model} needs a predictor")

    results = []
    for index, trial in enumerate(trials):
        if model == C.MODEL_RANDOM:
            result = random_plan(trial.state, trial.goal, make_rng(trial.seed, 3), T)
        else:
            result = plan(trial.state, trial.goal, predictor, replace(cfg, seed=trial.seed), T)
        results.append(result)
        if progress_callback:
            progress_callback(index + 1, len(trials))

    if out_csv is not None:
        write_bytes_atomic(out_csv, csv_bytes(REPORT_HEADER, report_rows(trials, results)))
        print(f"Saved plan report to {out_csv}")
    accuracy = hit_accuracy(results)
    summary = ', '.join(f"hit@{p}px {accuracy[p]:.2f}" for p in C.HIT_THRESHOLDS)
    print(f"{model}: {summary} over {len(results)} trials")
    return results
