import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import torch

from cutseg.data.images import ReferenceSet
from cutseg.data.phantoms import PhantomSpec, generate_phantom
from cutseg.errors import ConfigError, InvalidArgumentError
from cutseg.network.checkpoint import load_checkpoint
from cutseg.network.models import infer, init_model
from cutseg.thresholding import Histogram256, HistogramConfig
from cutseg.training import (SCHEDULES, CyclePosition, TrainConfig,
                             augment_reference, check_termination,
                             epoch_seed, make_optimizers, peaks_separated,
                             run_training, train_discriminator_step,
                             train_main_step)
from cutseg.tests.test_models import random_batch, toy_config


def phantoms(n, with_anomaly, seed=0):
    spec = PhantomSpec(image_size=16)
    name = 'anomalous' if with_anomaly else 'normal'
    return [generate_phantom(spec, with_anomaly, seed * 1000 + i,
                             subject_id=name, index=i)[0]
            for i in range(n)]


def bumps(centers, height=100):
    counts = np.zeros(256, dtype=np.int64)
    for c in centers:
        for d in range(-3, 4):
            if 0 <= c + d < 256:
                counts[c + d] += height * (4 - abs(d))
    return Histogram256(counts)


def snapshot(params):
    return {k: v.detach().clone() for k, v in params.items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


class TestTrainConfig(unittest.TestCase):
    """Tests of schedules and validation."""

    def test_schedules(self):
        self.assertEqual(TrainConfig().cycles, SCHEDULES['brats'])
        self.assertEqual(TrainConfig(schedule='flair').cycles, (2, 4))
        self.assertEqual(TrainConfig(schedule='msseg',
                                     stage2_cycles=0).cycles, (3, 0))

    def test_validate(self):
        self.assertEqual(TrainConfig().validate(), [])
        self.assertEqual(TrainConfig(learning_rate=0).validate(), [])
        bad = TrainConfig(schedule='mnist', batch_size=0, stage1_cycles=-1,
                          loss_weights=(1, -1, 1))
        self.assertEqual(len(bad.validate()), 4)

    def test_position(self):
        self.assertEqual(CyclePosition(2, 0, 'D').to_dict(),
                         {'stage': 2, 'cycle_index': 0, 'phase': 'D'})
        with self.assertRaises(InvalidArgumentError):
            CyclePosition(3, 0, 'D')
        with self.assertRaises(InvalidArgumentError):
            CyclePosition(1, 0, 'X')

    def test_epoch_seed(self):
        self.assertEqual(epoch_seed(0, 1, 0, 'D', 0),
                         epoch_seed(0, 1, 0, 'D', 0))
        self.assertNotEqual(epoch_seed(0, 1, 0, 'D', 0),
                            epoch_seed(0, 1, 0, 'M', 0))


class TestSteps(unittest.TestCase):

    def setUp(self):
        self.state = init_model(toy_config(), seed=0)
        self.inputs = phantoms(8, True, seed=1)
        self.reference = phantoms(8, False, seed=2)

    def fakes(self):
        return infer(self.state, self.inputs).fence_slices()

    def test_zero_learning_rate(self):
        config = TrainConfig(learning_rate=0.0, batch_size=4)
        opt = make_optimizers(self.state, config)
        main = snapshot(self.state.main_weights)
        disc = snapshot(self.state.disc_weights)
        train_discriminator_step(self.state, self.fakes(), self.reference,
                                 opt, seed=0, config=config)
        train_main_step(self.state, self.inputs, opt, seed=0, config=config)
        self.assertTrue(same(main, self.state.main_weights))
        self.assertTrue(same(disc, self.state.disc_weights))
        self.assertEqual(self.state.step_counter, 6)

    def test_discriminator_step_leaves_main(self):
        config = TrainConfig(learning_rate=1e-3, batch_size=4)
        opt = make_optimizers(self.state, config)
        main = snapshot(self.state.main_weights)
        disc = snapshot(self.state.disc_weights)
        _, report = train_discriminator_step(self.state, self.fakes(),
                                             self.reference, opt, seed=0,
                                             config=config)
        self.assertTrue(same(main, self.state.main_weights))
        self.assertFalse(same(disc, self.state.disc_weights))
        self.assertEqual((report.n, report.m), (8, 8))
        self.assertIsNone(report.loss_fence)

    def test_main_step_leaves_discriminator(self):
        config = TrainConfig(learning_rate=1e-3, batch_size=4)
        opt = make_optimizers(self.state, config)
        main = snapshot(self.state.main_weights)
        disc = snapshot(self.state.disc_weights)
        disc_stats = {k: v.clone() for k, v in
                      self.state.disc.named_buffers()}
        _, report = train_main_step(self.state, self.inputs, opt, seed=0,
                                    config=config)
        self.assertTrue(same(disc, self.state.disc_weights))
        self.assertTrue(same(disc_stats,
                             dict(self.state.disc.named_buffers())))
        self.assertFalse(same(main, self.state.main_weights))
        self.assertIsNone(report.loss_discriminator)
        self.assertGreaterEqual(report.loss_disjoincy, 0.0)

    def test_losses_descend(self):
        config = TrainConfig(learning_rate=1e-3, batch_size=4)
        opt = make_optimizers(self.state, config)
        fakes = self.fakes()
        d_losses, m_losses = [], []
        for epoch in range(25):
            _, report = train_discriminator_step(
                self.state, fakes, self.reference, opt, seed=epoch,
                config=config)
            d_losses.append(report.loss_discriminator)
        for epoch in range(25):
            _, report = train_main_step(self.state, self.inputs, opt,
                                        seed=epoch, config=config)
            m_losses.append(report.main_total())
        self.assertLess(np.mean(d_losses[-5:]), np.mean(d_losses[:5]))
        self.assertLess(np.mean(m_losses[-5:]), np.mean(m_losses[:5]))

    def test_empty_sets(self):
        opt = make_optimizers(self.state, TrainConfig())
        with self.assertRaises(InvalidArgumentError):
            train_discriminator_step(self.state, [], self.reference, opt, 0)
        with self.assertRaises(InvalidArgumentError):
            train_main_step(self.state, [], opt, 0)

    def test_augment_reference(self):
        reference = ReferenceSet(tuple(self.reference))
        augmented = augment_reference(self.state, reference)
        self.assertEqual(len(augmented), 16)
        for original, kept in zip(reference, augmented[:8]):
            self.assertIs(original, kept)
        expected = infer(self.state, self.reference).fence.numpy()
        for i, s in enumerate(augmented[8:]):
            np.testing.assert_array_equal(s.pixels, expected[i, 0])
            self.assertEqual(s.subject_id, 'normal:fence')


class TestTermination(unittest.TestCase):

    def test_four_separated_peaks(self):
        config = HistogramConfig(min_separation=20)
        self.assertTrue(peaks_separated(bumps([0, 80, 170, 250]), config))

    def test_close_peaks(self):
        config = HistogramConfig(min_separation=20)
        self.assertFalse(peaks_separated(bumps([100, 110, 120]), config))

    def test_single_peak(self):
        self.assertFalse(peaks_separated(bumps([128])))
        self.assertFalse(peaks_separated(Histogram256()))

    def test_check_termination(self):
        state = init_model(toy_config(), seed=0)
        done, histogram = check_termination(
            state, random_batch(6, 16), HistogramConfig(eval_subset_size=4))
        self.assertEqual(histogram.total, 4 * 256)
        self.assertIsInstance(done, bool)


class TestRunTraining(unittest.TestCase):

    def setUp(self):
        self.inputs = phantoms(4, True, seed=3)
        self.reference = ReferenceSet(tuple(phantoms(4, False, seed=4)))

    def run_once(self, run_dir, **kwargs):
        fields = dict(batch_size=4, seed=7)
        fields.update(kwargs)
        state = init_model(toy_config(), seed=0)
        return run_training(state, self.inputs, self.reference,
                            TrainConfig(**fields), run_dir=run_dir)

    def test_zero_cycles(self):
        initial = init_model(toy_config(), seed=0).main_weights
        with tempfile.TemporaryDirectory() as tmp:
            state, history = self.run_once(tmp, stage1_cycles=0,
                                           stage2_cycles=0)
            self.assertEqual(sorted(os.listdir(tmp)),
                             ['ckpt_cycle0.bin', 'losses.jsonl'])
        self.assertEqual(len(history), 0)
        self.assertTrue(same(initial, state.main_weights))

    def test_schedule_and_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            state, history = self.run_once(tmp, stage1_cycles=2,
                                           stage2_cycles=1)
            files = set(os.listdir(tmp))
            with open(os.path.join(tmp, 'losses.jsonl')) as f:
                records = [json.loads(line) for line in f]
            last = load_checkpoint(os.path.join(tmp, 'ckpt_cycle3.bin'))
        self.assertEqual(len(history.cycles), 3)
        self.assertEqual(len(history), 6)
        self.assertEqual([e.position.phase for e in history],
                         ['D', 'M'] * 3)
        self.assertEqual([e.position.stage for e in history],
                         [1, 1, 1, 1, 2, 2])
        for k in range(4):
            self.assertIn(f'ckpt_cycle{k}.bin', files)
        for k in range(1, 4):
            self.assertIn(f'histogram_cycle{k}.csv', files)
        self.assertEqual(len(records), 6)
        self.assertEqual(records[4]['phase'], 'D')
        self.assertEqual(records[4]['m'], 8)
        self.assertEqual(last.position['cycle'], 3)
        self.assertEqual(last.state.step_counter, state.step_counter)
        self.assertFalse(history.stopped_early)

    def test_phases_keep_the_other_part_frozen(self):
        checks = []

        def guarded(step, frozen_part, trained_part):
            def wrapper(state, *args, **kwargs):
                frozen_before = snapshot(
                    getattr(state, frozen_part).state_dict())
                trained_before = snapshot(
                    getattr(state, trained_part).state_dict())
                result = step(state, *args, **kwargs)
                checks.append((
                    same(frozen_before,
                         getattr(state, frozen_part).state_dict()),
                    same(trained_before,
                         getattr(state, trained_part).state_dict())))
                return result
            return wrapper

        with mock.patch('cutseg.training.train_discriminator_step',
                        guarded(train_discriminator_step, 'main', 'disc')), \
                mock.patch('cutseg.training.train_main_step',
                           guarded(train_main_step, 'disc', 'main')):
            _, history = self.run_once(None, stage1_cycles=2,
                                       stage2_cycles=0,
                                       epochs_per_D_step=2)
        self.assertEqual(len(history), 6)
        self.assertEqual(len(checks), 6)
        # frozen weights and batch-norm buffers are bit-identical, the
        # trained part moved
        self.assertEqual(checks, [(True, False)] * 6)

    def test_reproducible(self):
        with tempfile.TemporaryDirectory() as a, \
                tempfile.TemporaryDirectory() as b:
            self.run_once(a, stage1_cycles=1, stage2_cycles=1)
            self.run_once(b, stage1_cycles=1, stage2_cycles=1)
            for name in ('ckpt_cycle2.bin', 'losses.jsonl',
                         'histogram_cycle2.csv'):
                with open(os.path.join(a, name), 'rb') as fa, \
                        open(os.path.join(b, name), 'rb') as fb:
                    self.assertEqual(fa.read(), fb.read(), msg=name)

    def test_early_stop(self):
        # one required peak is already there after the first cycle
        state = init_model(toy_config(), seed=0)
        _, history = run_training(state, self.inputs, self.reference,
                                  TrainConfig(batch_size=4,
                                              early_stop_on_peaks=True),
                                  HistogramConfig(min_peaks=1))
        self.assertTrue(history.stopped_early)
        self.assertEqual(len(history.cycles), 1)

    def test_invalid_config(self):
        state = init_model(toy_config(), seed=0)
        with self.assertRaises(ConfigError):
            run_training(state, self.inputs, self.reference,
                         TrainConfig(batch_size=0))


if __name__ == '__main__':
    unittest.main()
