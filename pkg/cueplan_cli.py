#!/usr/bin/env python3
# (c) 2024 Niels Provos
#
'''
Command line entry point: dataset generation, training, evaluation, imagination
dumps and planning benchmarks.

    python cueplan_cli.py gen --config cfg.json --out data/1b --balls 1
    python cueplan_cli.py train --config cfg.json --curriculum data/1b,data/2b,data/3b
    python cueplan_cli.py eval --models cv,oc --checkpoint runs/stage3_3b.blnn
    python cueplan_cli.py imagine --model oracle --steps 100 --out frames
    python cueplan_cli.py plan --models oracle,random --trials 100
'''

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import constants as C
from controller import RunConfig
from eval_metrics import evaluate, format_error_table, transfer_labels, write_error_csv
from imagination import IOFailure, dump_frames, imagine, save_imagination
from physics_core import EventOverflow
from planner import hit_accuracy, run_benchmark, sample_trials
from predictors import LEARNED, build_predictor
from training import CheckpointMissing, DivergenceDetected, train_curriculum
from utils import csv_bytes, format_float, write_bytes_atomic
from worldgen import (
    PlacementFailure, generate_dataset, held_out_seed, load_dataset, sample_world, save_dataset,
    test_spec_variants, variant_by_name
)


def split_list(value):
    return [item.strip() for item in value.split(',') if item.strip()]


def parse_checkpoints(values, models):
    """
    Maps learned model names to checkpoints.

    Each value is either `model=path` or a bare path, which goes to the only learned
    model in `models`.
    """
    checkpoints = {}
    learned = [m for m in models if m in LEARNED]
    for value in values or []:
        if '=' in value:
            model, path = value.split('=', 1)
        elif len(learned) == 1:
            model, path = learned[0], value
        else:
            raise ValueError(f"Checkpoint {value} must be given as model=path")
        checkpoints[model] = path
    missing = [m for m in learned if m not in checkpoints]
    if missing:
        raise ValueError(f"Models {missing} need a --checkpoint")
    return checkpoints


def resolve_dataset(name, data_dir):
    path = Path(name)
    if not path.is_dir() and (Path(data_dir) / name).is_dir():
        path = Path(data_dir) / name
    if not (path / C.MANIFEST_FILE).exists():
        raise FileNotFoundError(f"No dataset at {path}")
    return path


def held_out_datasets(config, names):
    """Generates the named evaluation variants from seeds disjoint from training data."""
    variants = [spec.name for spec in test_spec_variants()]
    datasets = []
    for name in names:
        spec = variant_by_name(name)
        seed = held_out_seed(config.seed, variants.index(name))
        datasets.append(generate_dataset(spec, config.eval_sequences, seed))
    return datasets


def cmd_gen(args, config):
    world = config.world
    if args.balls is not None:
        world = replace(world, n_balls=args.balls, name=f"{args.balls}-balls")
    n_sequences = args.n_sequences or config.n_sequences
    out_dir = Path(args.out or config.data_dir)

    dataset = generate_dataset(world, n_sequences, config.seed)
    save_dataset(dataset, out_dir)
    n_frames = sum(len(seq.trajectory) for seq in dataset.sequences)
    n_events = sum(len(seq.trajectory.events) for seq in dataset.sequences)
    print(f"Dataset {world.name}: {len(dataset)} sequences, {n_frames} frames, "
          f"{n_events} collision events")
    return 0


def cmd_train(args, config):
    model = args.model or config.model
    if model not in LEARNED:
        raise ValueError(f"Only {list(LEARNED)} models can be trained, got {model}")
    arch = config.architecture(model)
    cfg = replace(config.train, seed=config.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)

    if args.curriculum:
        stages = [(resolve_dataset(name, config.data_dir), cfg.epochs)
                  for name in split_list(args.curriculum)]
    elif cfg.curriculum:
        stages = [(resolve_dataset(path, config.data_dir), epochs)
                  for path, epochs in cfg.curriculum]
    else:
        stages = [(resolve_dataset(args.dataset or config.data_dir, config.data_dir), cfg.epochs)]

    loaded = [(load_dataset(path), epochs) for path, epochs in stages]
    out_dir = Path(args.out or config.out_dir)
    paths = train_curriculum(arch, loaded, cfg, out_dir, config.render, initial=args.resume)
    print(f"Final checkpoint {paths[-1]}")
    return 0


def cmd_eval(args, config):
    models = split_list(args.models) if args.models else [args.model or config.model]
    checkpoints = parse_checkpoints(args.checkpoint, models)
    names = split_list(args.datasets) if args.datasets else config.eval_datasets
    if args.sequences is not None:
        config.eval_sequences = args.sequences
    predictors = {model: build_predictor(model, checkpoints.get(model), config.eval_horizon)
                  for model in models}
    datasets = held_out_datasets(config, names)

    results = {}
    for model, predictor in predictors.items():
        results[model] = evaluate(predictor, datasets, config.eval_horizon)

    labels = transfer_labels({model: getattr(p, 'trained_balls', None)
                              for model, p in predictors.items()}, datasets)
    out_dir = Path(args.out or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_error_csv(results, out_dir / 'errors.csv', labels)
    reports = []
    for name in names:
        title = name
        tags = [f"{model} {labels[(model, name)]}" for model in models if (model, name) in labels]
        if tags:
            title = f"{name} ({', '.join(tags)})"
        text = format_error_table({model: results[model][name] for model in models})
        reports.append(f"{title}\n{text}\n")
        print(f"{title}\n{text}")
    write_bytes_atomic(out_dir / 'errors.txt', '\n'.join(reports).encode('utf-8'))
    print(f"Saved error report to {out_dir}")
    return 0


def cmd_imagine(args, config):
    model = args.model or config.model
    checkpoint = (args.checkpoint or [config.checkpoint])[0]
    # rollouts only consume the next step
    predictor = build_predictor(model, checkpoint if model in LEARNED else None, horizon=1)
    steps = args.steps or config.plan_steps
    state, forces = sample_world(config.world, config.seed)

    imagined = imagine(state, forces, predictor, steps, config.render)
    out_dir = Path(args.out or config.out_dir)
    dump_frames(imagined, out_dir)
    save_imagination(imagined, out_dir / 'imagined.blrd')
    return 0


def cmd_plan(args, config):
    models = split_list(args.models) if args.models else config.plan_models
    unknown = [m for m in models if m not in RunConfig.PLAN_MODELS]
    if unknown:
        raise ValueError(f"Unknown planning models {unknown}")
    checkpoints = parse_checkpoints(args.checkpoint, models)
    trials = sample_trials(args.trials or config.plan_trials, config.seed)
    steps = args.steps or config.plan_steps
    out_dir = Path(args.out or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for model in models:
        predictor = None
        if model not in (C.MODEL_ORACLE, C.MODEL_RANDOM):
            predictor = build_predictor(model, checkpoints.get(model))
        results = run_benchmark(trials, model, predictor, config.cma, steps,
                                out_dir / f"plan_{model}.csv")
        accuracy = hit_accuracy(results)
        rows.append([model] + [format_float(accuracy[p], 4) for p in C.HIT_THRESHOLDS])
    header = ['model'] + [f"hit@{p}" for p in C.HIT_THRESHOLDS]
    write_bytes_atomic(out_dir / 'plan_summary.csv', csv_bytes(header, rows))
    print(f"Saved planning summary to {out_dir / 'plan_summary.csv'}")
    return 0


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'imagine': cmd_imagine,
    'plan': cmd_plan,
}


def build_parser():
    parser = argparse.ArgumentParser(
        description='Learn billiards dynamics from pixels and plan shots with them')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', type=str,
                        help='Path to the run configuration (JSON)')
    common.add_argument('--seed', type=int,
                        help='Master seed, overrides the config and CUEPLAN_SEED')
    common.add_argument('--threads', type=int,
                        help='Worker threads; 1 gives the sequential deterministic path')
    common.add_argument('-o', '--out', type=str,
                        help='Output directory')

    subparsers = parser.add_subparsers(dest='command', required=True)

    gen = subparsers.add_parser('gen', parents=[common], help='Generate a dataset')
    gen.add_argument('--balls', type=int, help='Number of balls per world')
    gen.add_argument('-n', '--n-sequences', type=int, help='Number of sequences')

    train = subparsers.add_parser('train', parents=[common], help='Train a predictor')
    train.add_argument('--model', choices=sorted(LEARNED), help='Model to train')
    train.add_argument('--dataset', type=str, help='Dataset directory')
    train.add_argument('--curriculum', type=str,
                       help='Comma separated dataset directories ordered by ball count')
    train.add_argument('--resume', type=str, help='Checkpoint initializing the first stage')
    train.add_argument('--epochs', type=int, help='Epochs per stage')

    evaluate_parser = subparsers.add_parser('eval', parents=[common],
                                            help='Evaluate predictors on held-out worlds')
    evaluate_parser.add_argument('--model', type=str, help='Model to evaluate')
    evaluate_parser.add_argument('--models', type=str, help='Comma separated models')
    evaluate_parser.add_argument('--checkpoint', action='append',
                                 help='Checkpoint as model=path or a bare path')
    evaluate_parser.add_argument('--datasets', type=str,
                                 help='Comma separated evaluation variants')
    evaluate_parser.add_argument('--sequences', type=int, help='Sequences per variant')

    imagine_parser = subparsers.add_parser('imagine', parents=[common],
                                           help='Dump an imagined rollout as PPM frames')
    imagine_parser.add_argument('--model', type=str, help='Model driving the rollout')
    imagine_parser.add_argument('--checkpoint', action='append', help='Checkpoint')
    imagine_parser.add_argument('--steps', type=int, help='Number of imagined steps')

    plan_parser = subparsers.add_parser('plan', parents=[common],
                                        help='Run the planning benchmark')
    plan_parser.add_argument('--models', type=str, help='Comma separated models')
    plan_parser.add_argument('--checkpoint', action='append',
                             help='Checkpoint as model=path or a bare path')
    plan_parser.add_argument('--trials', type=int, help='Number of trials')
    plan_parser.add_argument('--steps', type=int, help='Rollout length')
    return parser


def load_config(args):
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    config.apply_env()
    if args.seed is not None:
        config.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    return config


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # usage errors are validation failures
        return C.EXIT_VALIDATION if e.code else 0
    try:
        config = load_config(args)
        config.check_paths()
        config.apply_threads()
        print(f"Command: {args.command}")
        print(f"Seed: {config.seed}")
        print(f"Config: {config.to_json()}")
        return COMMANDS[args.command](args, config)
    except (DivergenceDetected, EventOverflow) as e:
        print(f"Error: {e}")
        return C.EXIT_NUMERICAL
    except PlacementFailure as e:
        print(f"Error: {e}")
        return C.EXIT_GENERATION
    except (OSError, IOFailure, CheckpointMissing) as e:
        print(f"Error: {e}")
        return C.EXIT_IO
    except ValueError as e:
        print(f"Error: {e}")
        return C.EXIT_VALIDATION


if __name__ == '__main__':
    sys.exit(main())
