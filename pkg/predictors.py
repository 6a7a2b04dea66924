# (c) 2024 Niels Provos
#
'''
Velocity Predictors

Every predictor maps the observed history of a world to per-ball predictions of the
velocities u_{t+1} .. u_{t+h} in world px/step. The same interface drives
evaluation, imagination rollouts and planning:

    contexts = predictor.new_contexts(state)
    predictions, contexts = predictor.predict_all(observation, contexts)

Contexts are opaque to callers. They carry the LSTM memory of the learned models and
the simulator state of the oracle.

The object-centric (OC) network sees a stack of four glimpses fixated on one ball and
the force applied to it. The frame-centric (FC) network sees the whole table and the
forces of all balls and predicts fixed slots ordered by ball id.
'''

from dataclasses import asdict, dataclass, field

import numpy as np

import constants as C
from physics_core import DEFAULT_PARAMS, Vec2, simulate, step
from render import RenderConfig, frame_stack_from_states, glimpse_stack_from_states
from tensor_autodiff import (
    ParamSet, Tape, conv_output_size, init_conv, init_linear, init_lstm
)
from utils import make_rng


class TooManyBalls(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    """Velocities for k = 1 .. h as an [h, 2] array."""
    velocities: np.ndarray

    def __len__(self):
        return len(self.velocities)

    def step(self, k):
        vx, vy = self.velocities[k - 1]
        return Vec2(float(vx), float(vy))


@dataclass
class Observation:
    """States up to the current step (states[0] already carries the applied forces)."""
    states: list
    forces: dict = field(default_factory=dict)

    @property
    def t(self):
        return len(self.states) - 1

    @property
    def current(self):
        return self.states[-1]

    def force_at_current(self, ball_id):
        if self.t == 0:
            return self.forces.get(ball_id, Vec2(0.0, 0.0))
        return Vec2(0.0, 0.0)


@dataclass(frozen=True)
class Architecture:
    in_channels: int = C.STACK_DEPTH
    resolution: int = C.GLIMPSE_RESOLUTION
    conv_channels: tuple = (8, 16, 16, 16)
    kernel: int = 3
    stride: int = 2
    encoder: int = 64
    lstm: int = 64
    horizon: int = C.HORIZON
    force_scale: float = C.FORCE_MAX
    use_lstm: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'conv_channels', tuple(self.conv_channels))
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if not self.conv_channels:
            raise ValueError("At least one convolution is required")
        if min(self.encoder, self.lstm, self.in_channels) < 1:
            raise ValueError("Layer widths must be positive")
        size = self.resolution
        for channels in self.conv_channels:
            size = conv_output_size(size, self.kernel, self.stride)
            if size < 1:
                raise ValueError(f"Input resolution {self.resolution} is too small for "
                                 f"{len(self.conv_channels)} convolutions")

    @property
    def conv_output(self):
        size = self.resolution
        for _ in self.conv_channels:
            size = conv_output_size(size, self.kernel, self.stride)
        return self.conv_channels[-1], size, size

    @property
    def flat_size(self):
        channels, height, width = self.conv_output
        return channels * height * width

    @property
    def slots(self):
        return 1

    @property
    def force_inputs(self):
        return 2 * self.slots

    @property
    def output_size(self):
        return 2 * self.horizon * self.slots

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class OCArchitecture(Architecture):
    kind = C.MODEL_OC


@dataclass(frozen=True)
class FCArchitecture(Architecture):
    resolution: int = C.FRAME_RESOLUTION
    max_balls: int = C.MAX_BALLS
    kind = C.MODEL_FC

    def __post_init__(self):
        super().__post_init__()
        if self.max_balls < 1:
            raise ValueError(f"max_balls must be at least 1, got {self.max_balls}")

    @property
    def slots(self):
        return self.max_balls


ARCHITECTURES = {C.MODEL_OC: OCArchitecture, C.MODEL_FC: FCArchitecture}


@dataclass
class RecurrentState:
    """Hidden and cell states of both recurrent layers; Tensors while training."""
    h1: object
    c1: object
    h2: object
    c2: object

    @staticmethod
    def zeros(arch):
        return RecurrentState(*(np.zeros(arch.lstm) for _ in range(4)))

    def as_constants(self, tape):
        return RecurrentState(*(tape.constant(v) for v in (self.h1, self.c1, self.h2, self.c2)))

    def values(self):
        return RecurrentState(*(v.data.copy() for v in (self.h1, self.c1, self.h2, self.c2)))


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases and forget-gate biases of +1."""
    rng = make_rng(seed)
    params = ParamSet()
    channels = arch.in_channels
    for i, out_channels in enumerate(arch.conv_channels):
        init_conv(params, f'conv{i + 1}', channels, out_channels, arch.kernel, rng)
        channels = out_channels
    init_linear(params, 'encoder', arch.flat_size + arch.force_inputs, arch.encoder, rng)
    if arch.use_lstm:
        init_lstm(params, 'lstm1', arch.encoder, arch.lstm, rng)
        init_lstm(params, 'lstm2', arch.encoder + arch.lstm, arch.lstm, rng)
    else:
        init_linear(params, 'ff1', arch.encoder, arch.lstm, rng)
        init_linear(params, 'ff2', arch.encoder + arch.lstm, arch.lstm, rng)
    init_linear(params, 'decoder', 2 * arch.lstm, arch.output_size, rng)
    return params


def network_forward(tape, params, arch, image, force_input, state):
    """
    One time step of the predictor network.

    Args:
        tape (Tape): Records the computation.
        params (ParamSet): Network parameters.
        arch (Architecture): Layer sizes.
        image (numpy.ndarray): Input stack [in_channels, resolution, resolution].
        force_input (numpy.ndarray): Forces already divided by the force scale.
        state (RecurrentState): Tensors of the previous step.

    Returns:
        tuple: (Tensor [h * slots, 2], RecurrentState of Tensors)
    """
    x = tape.constant(image)
    for i in range(len(arch.conv_channels)):
        x = tape.relu(tape.conv2d(x, params[f'conv{i + 1}.W'], params[f'conv{i + 1}.b'],
                                  arch.stride))
    features = tape.concat([tape.flatten(x), tape.constant(force_input)])
    encoded = tape.relu(tape.linear(features, params['encoder.W'], params['encoder.b']))

    if arch.use_lstm:
        h1, c1 = tape.lstm_cell(encoded, state.h1, state.c1, params['lstm1.W'], params['lstm1.b'])
        h2, c2 = tape.lstm_cell(tape.concat([encoded, h1]), state.h2, state.c2,
                                params['lstm2.W'], params['lstm2.b'])
    else:
        h1 = tape.relu(tape.linear(encoded, params['ff1.W'], params['ff1.b']))
        h2 = tape.relu(tape.linear(tape.concat([encoded, h1]), params['ff2.W'], params['ff2.b']))
        c1, c2 = state.c1, state.c2

    out = tape.linear(tape.concat([h1, h2]), params['decoder.W'], params['decoder.b'])
    return tape.reshape(out, (-1, 2)), RecurrentState(h1, c1, h2, c2)


def scaled_force(force, arch):
    return np.array([force.x, force.y]) / arch.force_scale


def cv_predict(prev_velocity, h):
    """Repeats the previous velocity for the whole horizon."""
    if h < 1:
        raise ValueError(f"h must be at least 1, got {h}")
    return Prediction(np.tile([prev_velocity.x, prev_velocity.y], (h, 1)).astype(np.float64))


def oc_predict(stack, ctx, params, arch):
    """
    Runs the object-centric network on one glimpse stack.

    Returns:
        tuple: (Prediction, RecurrentState with the updated memory)
    """
    tape = Tape()
    out, state = network_forward(tape, params, arch, stack.as_array(),
                                 scaled_force(stack.force, arch), ctx.as_constants(tape))
    return Prediction(out.data.copy()), state.values()


def fc_predict(frame, forces, ctx, params, arch):
    """
    Runs the frame-centric network on a whole-table input stack.

    Args:
        frame (numpy.ndarray): Input stack [in_channels, resolution, resolution].
        forces (list): Force Vec2 per ball, ordered by ball id.
        ctx (RecurrentState): Memory of the previous step.

    Returns:
        tuple: (list with a Prediction per slot, None for unused slots; RecurrentState)
    """
    if len(forces) > arch.max_balls:
        raise TooManyBalls(f"{len(forces)} balls exceed the {arch.max_balls} model slots")
    force_input = np.zeros(arch.force_inputs)
    for i, force in enumerate(forces):
        force_input[2 * i:2 * i + 2] = scaled_force(force, arch)
    tape = Tape()
    out, state = network_forward(tape, params, arch, frame, force_input, ctx.as_constants(tape))
    velocities = out.data.reshape(arch.max_balls, arch.horizon, 2)
    slots = [Prediction(velocities[i].copy()) if i < len(forces) else None
             for i in range(arch.max_balls)]
    return slots, state.values()


def oracle_predict(state, ball_id, h, params=None):
    """Velocities of a ball read from an h-step ground-truth simulation."""
    traj = simulate(state, {}, h, params or DEFAULT_PARAMS)
    return Prediction(traj.displacements(ball_id))


class Predictor:
    name = 'predictor'

    def __init__(self, horizon=C.HORIZON):
        self.horizon = horizon

    def new_contexts(self, state):
        return None

    def predict_all(self, observation, contexts):
        raise NotImplementedError


class StaticPredictor(Predictor):
    name = C.MODEL_STATIC

    def predict_all(self, observation, contexts):
        zeros = Prediction(np.zeros((self.horizon, 2)))
        return {ball.id: zeros for ball in observation.current.balls}, contexts


class ConstantVelocityPredictor(Predictor):
    name = C.MODEL_CV

    def predict_all(self, observation, contexts):
        predictions = {}
        for index, ball in enumerate(observation.current.balls):
            if observation.t == 0:
                velocity = ball.velocity
            else:
                velocity = ball.center - observation.states[-2].balls[index].center
            predictions[ball.id] = cv_predict(velocity, self.horizon)
        return predictions, contexts


class OraclePredictor(Predictor):
    """
    Ground-truth simulation. The context holds the simulated future starting at the
    current step, so rollouts never depend on the observed velocities.
    """
    name = C.MODEL_ORACLE

    def __init__(self, horizon=C.HORIZON, params=None):
        super().__init__(horizon)
        self.params = params or DEFAULT_PARAMS

    def predict_all(self, observation, contexts):
        window = list(contexts) if contexts is not None else [observation.current]
        while len(window) < self.horizon + 1:
            window.append(step(window[-1], self.params)[0])

        predictions = {}
        for index, ball in enumerate(observation.current.balls):
            centers = np.array([s.balls[index].center.as_tuple() for s in window])
            # the first step is relative to the observed center
            centers[0] = ball.center.as_tuple()
            predictions[ball.id] = Prediction(np.diff(centers, axis=0))
        return predictions, window[1:]


def network_descriptor(predictor):
    """Everything besides the weights that load_predictor needs to rebuild a model."""
    descriptor = {'kind': predictor.name, 'arch': predictor.arch.to_dict(),
                  'render': asdict(predictor.render)}
    if predictor.trained_balls is not None:
        descriptor['trained_balls'] = predictor.trained_balls
    return descriptor


class ObjectCentricPredictor(Predictor):
    name = C.MODEL_OC

    def __init__(self, arch, params, render=None, trained_balls=None):
        super().__init__(arch.horizon)
        # ball count of the last training set, used to label transfer results
        self.trained_balls = trained_balls
        self.render = render or RenderConfig(resolution=arch.resolution)
        assert self.render.resolution == arch.resolution, \
            f"Glimpse resolution {self.render.resolution} != network input {arch.resolution}"
        assert arch.in_channels == C.STACK_DEPTH * self.render.channels, \
            f"Network expects {arch.in_channels} input channels"
        self.arch = arch
        self.params = params

    def new_contexts(self, state):
        return {ball.id: RecurrentState.zeros(self.arch) for ball in state.balls}

    def predict_all(self, observation, contexts):
        history = observation.states[-C.STACK_DEPTH:]
        predictions, updated = {}, {}
        for ball in observation.current.balls:
            stack = glimpse_stack_from_states(history, ball.id,
                                              observation.force_at_current(ball.id), self.render)
            ctx = contexts.get(ball.id) or RecurrentState.zeros(self.arch)
            predictions[ball.id], updated[ball.id] = oc_predict(stack, ctx, self.params, self.arch)
        return predictions, updated

    def descriptor(self):
        return network_descriptor(self)


class FrameCentricPredictor(Predictor):
    name = C.MODEL_FC

    def __init__(self, arch, params, render=None, trained_balls=None):
        super().__init__(arch.horizon)
        self.trained_balls = trained_balls
        self.render = render or RenderConfig(frame_resolution=arch.resolution)
        assert self.render.frame_resolution == arch.resolution, \
            f"Frame resolution {self.render.frame_resolution} != network input {arch.resolution}"
        self.arch = arch
        self.params = params

    def new_contexts(self, state):
        if len(state.balls) > self.arch.max_balls:
            raise TooManyBalls(f"{len(state.balls)} balls exceed the "
                               f"{self.arch.max_balls} model slots")
        return RecurrentState.zeros(self.arch)

    def predict_all(self, observation, contexts):
        balls = sorted(observation.current.balls, key=lambda b: b.id)
        frames = frame_stack_from_states(observation.states[-C.STACK_DEPTH:], (), self.render)
        forces = [observation.force_at_current(b.id) for b in balls]
        ctx = contexts if contexts is not None else RecurrentState.zeros(self.arch)
        slots, updated = fc_predict(frames.as_array(), forces, ctx, self.params, self.arch)
        return {ball.id: slots[i] for i, ball in enumerate(balls)}, updated

    def descriptor(self):
        return network_descriptor(self)


LEARNED = {C.MODEL_OC: ObjectCentricPredictor, C.MODEL_FC: FrameCentricPredictor}


def save_predictor(predictor, path):
    predictor.params.save(path, predictor.descriptor())


def load_predictor(path):
    """Rebuilds an OC or FC predictor from a checkpoint and its embedded descriptor."""
    params, descriptor = ParamSet.load(path)
    kind = descriptor.get('kind')
    if kind not in LEARNED:
        raise ValueError(f"Checkpoint {path} holds unknown model kind {kind!r}")
    arch = ARCHITECTURES[kind](**descriptor['arch'])
    render = RenderConfig(**descriptor['render'])
    expected = init_params(arch, 0)
    expected.load_state(params)
    return LEARNED[kind](arch, expected, render, descriptor.get('trained_balls'))


def build_predictor(model, checkpoint=None, horizon=C.HORIZON):
    """Creates a predictor by name; learned models need a checkpoint."""
    if model == C.MODEL_CV:
        return ConstantVelocityPredictor(horizon)
    if model == C.MODEL_ORACLE:
        return OraclePredictor(horizon)
    if model == C.MODEL_STATIC:
        return StaticPredictor(horizon)
    if model in LEARNED:
        if checkpoint is None:
            raise ValueError(f"Model {model} needs a checkpoint")
        predictor = load_predictor(checkpoint)
        if predictor.name != model:
            raise ValueError(f"Checkpoint {checkpoint} holds a {predictor.name} model, not {model}")
        return predictor
    raise ValueError(f"Unknown model {model}")
