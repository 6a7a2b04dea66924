# (c) 2024 Niels Provos
#
'''
Run Configuration

A RunConfig carries every default the command line uses: the world family, the
training and planning settings, render sizes, evaluation sizes, paths and the master
seed. It round-trips through canonical JSON so a run is reproducible from its config
file alone.
'''

import os
import threading
from dataclasses import asdict, replace
from pathlib import Path

import cv2
import numba as nb

import constants as C
from planner import CmaConfig
from predictors import ARCHITECTURES
from render import RenderConfig
from training import TrainConfig
from utils import canonical_json, load_json, write_bytes_atomic
from worldgen import WorldSpec, test_spec_variants


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value


class RunConfig:
    __slots__ = (
        '_lock', '_seed', '_threads', '_n_sequences', '_eval_sequences', '_eval_horizon',
        '_plan_trials', '_plan_steps', '_model', '_eval_datasets', '_plan_models',
        'world', 'train', 'cma', 'render', 'arch', 'data_dir', 'out_dir', 'checkpoint'
    )
    CONFIG_FILE = 'config.json'
    MODELS = (C.MODEL_OC, C.MODEL_FC, C.MODEL_CV, C.MODEL_ORACLE, C.MODEL_STATIC)
    PLAN_MODELS = (C.MODEL_ORACLE, C.MODEL_RANDOM, C.MODEL_CV, C.MODEL_OC, C.MODEL_FC)

    def __init__(self):
        # prevent concurrent writes
        self._lock = threading.Lock()

        self._seed = 0
        self._threads = 1
        self._n_sequences = 1000
        self._eval_sequences = 500
        self._eval_horizon = C.HORIZON
        self._plan_trials = 100
        self._plan_steps = C.PLAN_ROLLOUT_STEPS
        self._model = C.MODEL_OC
        self._eval_datasets = [spec.name for spec in test_spec_variants()]
        self._plan_models = [C.MODEL_ORACLE, C.MODEL_RANDOM]

        self.world = WorldSpec()
        self.train = TrainConfig()
        self.cma = CmaConfig()
        self.render = RenderConfig()
        # architecture overrides on top of the model defaults
        self.arch = {}

        self.data_dir = 'data'
        self.out_dir = 'runs'
        self.checkpoint = None

    @property
    def seed(self):
        return self._seed

    @seed.setter
    def seed(self, value):
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ValueError(f"seed must be a non-negative integer, got {value!r}")
        self._seed = value

    @property
    def threads(self):
        return self._threads

    @threads.setter
    def threads(self, value):
        self._threads = _positive_int('threads', value)

    @property
    def n_sequences(self):
        return self._n_sequences

    @n_sequences.setter
    def n_sequences(self, value):
        self._n_sequences = _positive_int('n_sequences', value)

    @property
    def eval_sequences(self):
        return self._eval_sequences

    @eval_sequences.setter
    def eval_sequences(self, value):
        self._eval_sequences = _positive_int('eval_sequences', value)

    @property
    def eval_horizon(self):
        return self._eval_horizon

    @eval_horizon.setter
    def eval_horizon(self, value):
        self._eval_horizon = _positive_int('eval_horizon', value)

    @property
    def plan_trials(self):
        return self._plan_trials

    @plan_trials.setter
    def plan_trials(self, value):
        self._plan_trials = _positive_int('plan_trials', value)

    @property
    def plan_steps(self):
        return self._plan_steps

    @plan_steps.setter
    def plan_steps(self, value):
        self._plan_steps = _positive_int('plan_steps', value)

    @property
    def model(self):
        return self._model

    @model.setter
    def model(self, value):
        if value not in self.MODELS:
            raise ValueError(f"model must be one of {self.MODELS}, got {value!r}")
        self._model = value

    @property
    def eval_datasets(self):
        return self._eval_datasets

    @eval_datasets.setter
    def eval_datasets(self, value):
        known = [spec.name for spec in test_spec_variants()]
        unknown = [name for name in value if name not in known]
        if not value or unknown:
            raise ValueError(f"eval_datasets must name variants from {known}, got {value!r}")
        self._eval_datasets = list(value)

    @property
    def plan_models(self):
        return self._plan_models

    @plan_models.setter
    def plan_models(self, value):
        unknown = [name for name in value if name not in self.PLAN_MODELS]
        if not value or unknown:
            raise ValueError(f"plan_models must be chosen from {self.PLAN_MODELS}, got {value!r}")
        self._plan_models = list(value)

    def architecture(self, model=None):
        """The network architecture for an OC or FC model, with the configured overrides."""
        model = model or self.model
        assert model in ARCHITECTURES, f"Model {model} has no network architecture"
        arch = dict(self.arch)
        if 'conv_channels' in arch:
            arch['conv_channels'] = tuple(arch['conv_channels'])
        arch.setdefault('horizon', self.train.horizon)
        arch.setdefault('in_channels', C.STACK_DEPTH * self.render.channels)
        if model == C.MODEL_OC:
            arch.setdefault('resolution', self.render.resolution)
        else:
            arch.setdefault('resolution', self.render.frame_resolution)
        return ARCHITECTURES[model](**arch)

    def apply_env(self, environ=None):
        """Lets CUEPLAN_SEED override the configured seed."""
        environ = os.environ if environ is None else environ
        value = environ.get(C.SEED_ENV_VAR)
        if value is None or value == '':
            return self
        try:
            self.seed = int(value)
        except ValueError as e:
            raise ValueError(f"{C.SEED_ENV_VAR} must be a non-negative integer, "
                             f"got {value!r}") from e
        return self

    def apply_threads(self):
        """Limits OpenCV and numba to the configured number of threads."""
        cv2.setNumThreads(self.threads)
        nb.set_num_threads(min(self.threads, nb.config.NUMBA_NUM_THREADS))

    def to_json(self):
        """
        Convert the config to a canonical JSON string.

        Returns:
            str: Sorted keys, two space indentation.
        """
        data = {
            'seed': self._seed,
            'threads': self._threads,
            'n_sequences': self._n_sequences,
            'eval_sequences': self._eval_sequences,
            'eval_horizon': self._eval_horizon,
            'eval_datasets': self._eval_datasets,
            'plan_trials': self._plan_trials,
            'plan_steps': self._plan_steps,
            'plan_models': self._plan_models,
            'model': self._model,
            'world': self.world.to_dict(),
            'train': self.train.to_dict(),
            'cma': asdict(self.cma),
            'render': asdict(self.render),
            'arch': self.arch,
            'data_dir': self.data_dir,
            'out_dir': self.out_dir,
        }
        if self.checkpoint is not None:
            data['checkpoint'] = self.checkpoint
        return canonical_json(data).decode('utf-8')

    @staticmethod
    def from_json(json_data):
        """
        Load a config from a JSON string; missing keys keep their defaults.

        Args:
            json_data (str or bytes): The JSON representation; None gives the defaults.

        Returns:
            RunConfig: The loaded config.

        Raises:
            ValueError: If the seed is missing or a value fails validation.
        """
        config = RunConfig()
        if json_data is None:
            return config

        data = load_json(json_data)
        if not isinstance(data, dict):
            raise ValueError("The config must be a JSON object")
        if 'seed' not in data:
            raise ValueError("The config must set a seed")

        for name in ('seed', 'threads', 'n_sequences', 'eval_sequences', 'eval_horizon',
                     'eval_datasets', 'plan_trials', 'plan_steps', 'plan_models', 'model'):
            if name in data:
                setattr(config, name, data[name])

        try:
            if 'world' in data:
                config.world = WorldSpec.from_dict(data['world'])
            if 'train' in data:
                config.train = replace(config.train, **data['train'])
            if 'cma' in data:
                config.cma = replace(config.cma, **data['cma'])
            if 'render' in data:
                config.render = replace(config.render, **data['render'])
        except TypeError as e:
            raise ValueError(f"Unknown config field: {e}") from e

        config.arch = dict(data.get('arch', {}))
        config.data_dir = data.get('data_dir', config.data_dir)
        config.out_dir = data.get('out_dir', config.out_dir)
        config.checkpoint = data.get('checkpoint')
        return config

    def to_file(self, file_path):
        """
        Save the config atomically.

        Args:
            file_path (str or Path): A JSON file, or a directory that receives config.json.
        """
        file_path = Path(file_path)
        if file_path.is_dir():
            file_path = file_path / RunConfig.CONFIG_FILE
        with self._lock:
            write_bytes_atomic(file_path, self.to_json().encode('utf-8'))

    @staticmethod
    def from_file(file_path):
        """
        Load the config from a file.

        Args:
            file_path (str or Path): A JSON file, or a directory holding config.json.

        Returns:
            RunConfig: The loaded config.
        """
        file_path = Path(file_path)
        if file_path.is_dir():
            file_path = file_path / RunConfig.CONFIG_FILE
        with open(file_path, 'r', encoding='utf-8') as file:
            return RunConfig.from_json(file.read())

    def check_paths(self):
        """Checks that the checkpoint named by the config exists."""
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise FileNotFoundError(f"Checkpoint {self.checkpoint} does not exist")

