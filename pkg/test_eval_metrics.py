import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np

import constants as C
from eval_metrics import (
    ErrorTable, angular_error, evaluate, format_error_table, magnitude_rel_error,
    near_collision_mask, transfer_label, transfer_labels, velocity_errors, write_error_csv
)
from physics_core import (
    Ball, CollisionEvent, CollisionKind, Table, Trajectory, Vec2, WorldState, simulate
)
from predictors import (
    ConstantVelocityPredictor, FCArchitecture, OCArchitecture, Observation, OraclePredictor,
    StaticPredictor
)
from training import TrainConfig, new_model, train
from utils import make_rng
import worldgen
from worldgen import (
    Dataset, WorldSpec, family_spec, generate_dataset, held_out_seed, variant_by_name
)


def fake_trajectory(n_frames, event_steps):
    state = WorldState((Ball(0, Vec2(100, 100)),), Table.rectangle(500, 400))
    events = [CollisionEvent(s, 0.5, CollisionKind.BALL_WALL, 0, 0) for s in event_steps]
    return Trajectory([state] * n_frames, events)


def small_dataset(n_balls=2, n_sequences=4, seed=5):
    spec = WorldSpec(n_balls=n_balls, seq_len_range=(20, 30), name=f'{n_balls}-balls')
    return generate_dataset(spec, n_sequences, seed)


class TestAngularError(unittest.TestCase):
    def test_examples(self):
        self.assertAlmostEqual(angular_error(Vec2(1, 0), Vec2(0, 1)), 90.0, places=12)
        self.assertEqual(angular_error(Vec2(3, -4), Vec2(3, -4)), 0.0)
        self.assertAlmostEqual(angular_error(Vec2(1, 0), Vec2(-1, 0)), 180.0, places=12)

    def test_excluded_and_zero_prediction(self):
        self.assertIsNone(angular_error(Vec2(1e-7, 0), Vec2(1, 0)))
        self.assertEqual(angular_error(Vec2(1, 0), Vec2(0, 0)), 180.0)

    def test_symmetry_and_range(self):
        rng = make_rng(0)
        for _ in range(100):
            u = Vec2(*rng.standard_normal(2))
            v = Vec2(*rng.standard_normal(2))
            a = angular_error(u, v)
            self.assertAlmostEqual(a, angular_error(v, u), places=12)
            self.assertGreaterEqual(a, 0.0)
            self.assertLessEqual(a, 180.0)


class TestMagnitudeError(unittest.TestCase):
    def test_examples(self):
        self.assertAlmostEqual(magnitude_rel_error(Vec2(10, 0), Vec2(0, 9)), 0.1, places=12)
        self.assertEqual(magnitude_rel_error(Vec2(2, 5), Vec2(2, 5)), 0.0)
        self.assertIsNone(magnitude_rel_error(Vec2(0, 0), Vec2(1, 1)))

    def test_vectorized_matches_scalar(self):
        rng = make_rng(1)
        predicted = rng.standard_normal((50, 2))
        targets = rng.standard_normal((50, 2))
        targets[3] = (0.0, 0.0)
        predicted[7] = (0.0, 0.0)
        angles, magnitudes, valid = velocity_errors(predicted, targets)
        for i in range(50):
            u, u_hat = Vec2(*targets[i]), Vec2(*predicted[i])
            expected = angular_error(u, u_hat)
            if expected is None:
                self.assertFalse(valid[i])
                continue
            self.assertTrue(valid[i])
            self.assertAlmostEqual(angles[i], expected, places=9)
            self.assertAlmostEqual(magnitudes[i], magnitude_rel_error(u, u_hat), places=12)
        self.assertEqual(angles[7], 180.0)


class TestNearCollisionMask(unittest.TestCase):
    def test_single_event(self):
        mask = near_collision_mask(fake_trajectory(20, [10]))
        np.testing.assert_array_equal(np.flatnonzero(mask), np.arange(6, 15))

    def test_no_events(self):
        self.assertFalse(np.any(near_collision_mask(fake_trajectory(20, []))))

    def test_union(self):
        mask = near_collision_mask(fake_trajectory(20, [3, 5]))
        np.testing.assert_array_equal(np.flatnonzero(mask), np.arange(0, 10))

    def test_clipped_at_end(self):
        mask = near_collision_mask(fake_trajectory(20, [18]))
        np.testing.assert_array_equal(np.flatnonzero(mask), np.arange(14, 20))


class TestErrorTable(unittest.TestCase):
    def test_accumulates_strata(self):
        table = ErrorTable(2, 'toy')
        table.add(True, [[0, 1], [1, 0]], [[1, 0], [2, 0]], [1, 1])
        table.add(False, [[1, 0], [0, 0]], [[1, 0], [0, 0]], [1, 1])
        np.testing.assert_allclose(table.cell(C.STRATUM_NEAR, 1), (90.0, 0.0), atol=1e-12)
        np.testing.assert_allclose(table.cell(C.STRATUM_NEAR, 2), (0.0, 0.5), atol=1e-12)
        self.assertEqual(table.cell(C.STRATUM_FAR, 1), (0.0, 0.0))
        self.assertIsNone(table.cell(C.STRATUM_FAR, 2))
        np.testing.assert_allclose(table.cell(C.STRATUM_OVERALL, 1), (45.0, 0.0), atol=1e-12)
        np.testing.assert_array_equal(table.excluded[C.STRATUM_OVERALL], [0, 1])
        np.testing.assert_array_equal(table.counts[C.STRATUM_OVERALL], [2, 1])

    def test_masked_steps_ignored(self):
        table = ErrorTable(3)
        table.add(False, np.ones((3, 2)), np.ones((3, 2)), [1, 0, 0])
        table.add(False, np.ones((3, 2)), np.ones((3, 2)), [0, 0, 0])
        np.testing.assert_array_equal(table.counts[C.STRATUM_OVERALL], [1, 0, 0])
        self.assertEqual(table.frames[C.STRATUM_OVERALL], 1)
        self.assertIsNone(table.cell(C.STRATUM_OVERALL, 4))

    def test_invalid_horizon(self):
        with self.assertRaises(ValueError):
            ErrorTable(0)


class TestEvaluate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = small_dataset()

    def test_oracle_is_exact(self):
        table = evaluate(OraclePredictor(horizon=5), [self.dataset])['2-balls']
        for stratum in (C.STRATUM_OVERALL, C.STRATUM_NEAR, C.STRATUM_FAR):
            self.assertEqual(np.count_nonzero(table.angular_sum[stratum]), 0)
            self.assertEqual(np.count_nonzero(table.magnitude_sum[stratum]), 0)
        self.assertTrue(np.all(table.counts[C.STRATUM_OVERALL] > 0))

    def test_stratum_counts_add_up(self):
        table = evaluate(ConstantVelocityPredictor(horizon=5), [self.dataset])['2-balls']
        np.testing.assert_array_equal(
            table.counts[C.STRATUM_NEAR] + table.counts[C.STRATUM_FAR],
            table.counts[C.STRATUM_OVERALL])
        self.assertEqual(table.frames[C.STRATUM_NEAR] + table.frames[C.STRATUM_FAR],
                         table.frames[C.STRATUM_OVERALL])
        n_frames = sum(len(seq.trajectory) - 1 for seq in self.dataset.sequences)
        self.assertEqual(table.frames[C.STRATUM_OVERALL], 2 * n_frames)

    def test_constant_velocity_exact_without_collisions(self):
        predictor = ConstantVelocityPredictor(horizon=5)
        for seq in self.dataset.sequences:
            traj = seq.trajectory
            contexts = predictor.new_contexts(traj.states[0])
            for t in range(len(traj) - 1):
                predictions, contexts = predictor.predict_all(
                    Observation(traj.states[:t + 1], traj.forces), contexts)
                for ball_id in traj.ball_ids:
                    targets, mask = traj.future_velocities(ball_id, t, 5)
                    angles, magnitudes, valid = velocity_errors(
                        predictions[ball_id].velocities, targets)
                    for k in range(1, 6):
                        touched = any(e.involves(ball_id) and max(t - 1, 0) <= e.step <= t + k - 1
                                      for e in traj.events)
                        if touched or not mask[k - 1] or not valid[k - 1]:
                            continue
                        self.assertLess(angles[k - 1], 1e-3)
                        self.assertLess(magnitudes[k - 1], 1e-5)

    def test_collision_free_world(self):
        state = WorldState((Ball(0, Vec2(500, 500)),), Table.rectangle(1000, 1000))
        traj = simulate(state, {0: Vec2(24000, -18000)}, 30)
        self.assertEqual(traj.events, [])
        dataset = small_dataset(1, 1)
        dataset.sequences[0].trajectory = traj
        table = evaluate(ConstantVelocityPredictor(horizon=5), [dataset])['1-balls']
        self.assertLess(np.max(table.mean_angular()), 1e-6)
        self.assertLess(np.max(table.mean_magnitude()), 1e-9)
        self.assertEqual(table.frames[C.STRATUM_NEAR], 0)

    def test_static_predictor(self):
        table = evaluate(StaticPredictor(horizon=3), [self.dataset])['2-balls']
        np.testing.assert_array_equal(table.mean_angular(), [180.0] * 3)
        np.testing.assert_allclose(table.mean_magnitude(), [1.0] * 3)

    def test_horizon_too_long(self):
        with self.assertRaises(ValueError):
            evaluate(ConstantVelocityPredictor(horizon=5), [self.dataset], h=6)

    def test_shorter_horizon(self):
        table = evaluate(ConstantVelocityPredictor(horizon=5), [self.dataset], h=2)['2-balls']
        self.assertEqual(table.horizon, 2)


class TestReports(unittest.TestCase):
    def setUp(self):
        self.cv = ErrorTable(20, 'train')
        self.cv.add(True, np.tile([0.0, 1.0], (20, 1)), np.tile([1.0, 0.0], (20, 1)),
                    np.ones(20))
        self.oracle = ErrorTable(20, 'train')
        self.oracle.add(False, np.ones((20, 2)), np.ones((20, 2)), np.ones(20))

    def test_text_table(self):
        text = format_error_table({'cv': self.cv, 'oracle': self.oracle})
        lines = text.splitlines()
        self.assertEqual(len(lines), 4)
        self.assertIn('cv overall', lines[0])
        self.assertIn('oracle near_collision', lines[0])
        self.assertTrue(lines[1].lstrip().startswith('t+1'))
        self.assertTrue(lines[3].lstrip().startswith('t+20'))
        cells = [cell.strip() for cell in lines[2].split('|')]
        self.assertEqual(cells, ['t+5', '90.0°/0.00', '90.0°/0.00', '0.0°/0.00', '-'])

    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'errors.csv'
            write_error_csv({'oracle': {'train': self.oracle}, 'cv': {'train': self.cv}}, path)
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'model,dataset,stratum,k,angular_deg,magnitude_rel,'
                                   'count,excluded,transfer')
        self.assertEqual(len(lines), 1 + 2 * 3 * 20)
        self.assertEqual(lines[1], 'cv,train,overall,1,90.000000,0.000000,1,0,')
        self.assertIn('cv,train,far,1,,,0,0,', lines)

    def test_csv_transfer_column(self):
        results = {'fc': {'4-balls': self.cv, 'train': self.oracle}}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'errors.csv'
            write_error_csv(results, path, {('fc', '4-balls'): '2B-on-4B'})
            lines = path.read_text(encoding='utf-8').splitlines()[1:]
        transfer = [line for line in lines if line.startswith('fc,4-balls,')]
        self.assertEqual(len(transfer), 3 * 20)
        self.assertTrue(all(line.endswith(',2B-on-4B') for line in transfer))
        self.assertTrue(all(line.endswith(',') for line in lines if ',train,' in line))

    def test_transfer_label(self):
        self.assertEqual(transfer_label(2, 4), '2B-on-4B')

    def test_transfer_labels(self):
        datasets = [Dataset([], spec, 0) for spec in worldgen.test_spec_variants()]
        labels = transfer_labels({'oc': 2, 'fc': 3, 'cv': None}, datasets)
        self.assertEqual(labels[('oc', '4-balls')], '2B-on-4B')
        self.assertEqual(labels[('oc', '6-balls')], '2B-on-6B')
        self.assertEqual(labels[('fc', '2-balls')], '3B-on-2B')
        self.assertEqual(labels[('fc', '6-balls')], '3B-on-6B')
        self.assertEqual({name for _, name in labels}, {f'{n}-balls' for n in C.TRANSFER_BALLS})
        self.assertFalse(any(model == 'cv' for model, _ in labels))
        self.assertEqual(transfer_labels({}, datasets), {})


@unittest.skipUnless(os.environ.get('CUEPLAN_SLOW'), 'slow held-out evaluation')
class TestConstantVelocityStructure(unittest.TestCase):
    def test_near_collision_errors_dominate(self):
        spec = WorldSpec(name='train')
        dataset = generate_dataset(spec, 500, held_out_seed(0, 0))
        table = evaluate(ConstantVelocityPredictor(), [dataset])['train']
        overall = table.mean_angular(C.STRATUM_OVERALL)
        near = table.mean_angular(C.STRATUM_NEAR)
        self.assertGreaterEqual(near[0], 3 * overall[0])
        self.assertGreater(near[19], 90.0)
        self.assertTrue(np.all(near > overall))
        self.assertTrue(np.all(np.diff(near[[0, 4, 19]]) > 0))


REFERENCE_CSV = Path(__file__).parent / 'reference' / 'errors.csv'


@unittest.skipUnless(os.environ.get('CUEPLAN_SLOW'), 'slow held-out evaluation')
@unittest.skipUnless(REFERENCE_CSV.exists(), 'no recorded reference run in reference/errors.csv')
class TestReferenceRun(unittest.TestCase):
    """Held-out CV errors stay within 40% of the recorded reference run."""

    def reference(self, model):
        cells = {}
        for line in REFERENCE_CSV.read_text(encoding='utf-8').splitlines()[1:]:
            row = line.split(',')
            if row[0] == model and row[1] == 'train' and row[4]:
                cells[(row[2], int(row[3]))] = float(row[4])
        return cells

    def test_constant_velocity_matches_reference(self):
        dataset = generate_dataset(WorldSpec(name='train'), 500, held_out_seed(0, 0))
        table = evaluate(ConstantVelocityPredictor(), [dataset])['train']
        reference = self.reference(C.MODEL_CV)
        for stratum in (C.STRATUM_OVERALL, C.STRATUM_NEAR):
            measured = table.mean_angular(stratum)
            for k in (1, 5, 20):
                with self.subTest(stratum=stratum, k=k):
                    expected = reference[(stratum, k)]
                    self.assertLessEqual(abs(measured[k - 1] - expected), 0.4 * expected)

    def test_oracle_reference_is_exact(self):
        self.assertTrue(all(value == 0.0 for value in self.reference(C.MODEL_ORACLE).values()))


# desk-scale training budget
LEARNED_CONFIG = TrainConfig(epochs=20, batches_per_epoch=20)
LEARNED_SEQUENCES = 1000
HELD_OUT_SEQUENCES = 100


def trained_model(arch, n_balls, seed=0):
    dataset = generate_dataset(family_spec(n_balls), LEARNED_SEQUENCES, seed)
    model = new_model(arch, seed)
    train(model, dataset, replace(LEARNED_CONFIG, seed=seed))
    return model


def held_out(name, n_sequences=HELD_OUT_SEQUENCES):
    names = [spec.name for spec in worldgen.test_spec_variants()]
    seed = held_out_seed(0, names.index(name))
    return generate_dataset(variant_by_name(name), n_sequences, seed)


def near_errors(predictor, dataset):
    table = evaluate(predictor, [dataset])[dataset.spec.name]
    return table.mean_angular(C.STRATUM_NEAR)


@unittest.skipUnless(os.environ.get('CUEPLAN_SLOW'), 'slow learned model training')
class TestObjectCentricOneBall(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.oc = trained_model(OCArchitecture(), 1)
        cls.train_world = held_out('train')

    def test_beats_constant_velocity_near_collisions(self):
        oc = near_errors(self.oc, self.train_world)
        cv = near_errors(ConstantVelocityPredictor(), self.train_world)
        self.assertLessEqual(oc[19], 0.75 * cv[19])

    def test_large_walls(self):
        train_error = near_errors(self.oc, self.train_world)
        large = near_errors(self.oc, held_out('large-walls'))
        self.assertLessEqual(large[19], 2 * train_error[19])


@unittest.skipUnless(os.environ.get('CUEPLAN_SLOW'), 'slow learned model training')
class TestBallCountTransfer(unittest.TestCase):
    def check_ordering(self, n_trained, variant, steps):
        oc = trained_model(OCArchitecture(), n_trained)
        fc = trained_model(FCArchitecture(), n_trained)
        dataset = held_out(variant)
        oc_errors, fc_errors = near_errors(oc, dataset), near_errors(fc, dataset)
        for k in steps:
            with self.subTest(k=k):
                self.assertLessEqual(oc_errors[k - 1], fc_errors[k - 1])

    def test_two_ball_models_on_four_balls(self):
        self.check_ordering(2, '4-balls', (5, 10, 20))

    def test_three_ball_models_on_six_balls(self):
        self.check_ordering(3, '6-balls', (20,))


if __name__ == '__main__':
    unittest.main()
