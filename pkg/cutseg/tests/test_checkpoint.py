import os
import tempfile
import unittest
import torch

from cutseg.errors import CutSegError
from cutseg.network.checkpoint import load_checkpoint, save_checkpoint
from cutseg.network.models import NetworkConfig, init_model
from cutseg.training import TrainConfig, make_optimizers, train_main_step
from cutseg.tests.test_models import random_batch, toy_config


class TestCheckpoint(unittest.TestCase):
    """Tests of checkpoint files."""

    def test_round_trip(self):
        state = init_model(toy_config(skip_connections=False), seed=4)
        state.step_counter = 17
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'a.bin')
            save_checkpoint(path, state, position={'stage': 1,
                                                   'cycle_index': 0,
                                                   'phase': 'M'})
            back = load_checkpoint(path)
        self.assertEqual(back.state.config, state.config)
        self.assertEqual(back.state.step_counter, 17)
        self.assertEqual(back.position['phase'], 'M')
        self.assertIsNone(back.optimizers)
        for k, v in state.main.state_dict().items():
            self.assertTrue(torch.equal(v, back.state.main.state_dict()[k]),
                            msg=k)
        for k, v in state.disc.state_dict().items():
            self.assertTrue(torch.equal(v, back.state.disc.state_dict()[k]),
                            msg=k)

    def test_byte_identical(self):
        state = init_model(toy_config(), seed=1)
        opt = make_optimizers(state, TrainConfig())
        with tempfile.TemporaryDirectory() as tmp:
            paths = [os.path.join(tmp, name) for name in ('x.bin', 'yy.bin')]
            for path in paths:
                save_checkpoint(path, state, opt)
            with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
                self.assertEqual(a.read(), b.read())
            self.assertFalse(os.path.exists(paths[0] + '.partial'))

    def test_resumed_step_matches(self):
        config = TrainConfig(learning_rate=1e-3, batch_size=2)
        inputs = random_batch(4, 16, seed=2)
        state = init_model(toy_config(), seed=0)
        opt = make_optimizers(state, config)
        state, _ = train_main_step(state, inputs, opt, seed=1, config=config)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'c.bin')
            save_checkpoint(path, state, opt)
            loaded = load_checkpoint(path)
        other = loaded.state
        other_opt = make_optimizers(other, config)
        other_opt.load_state_dict(loaded.optimizers)
        train_main_step(state, inputs, opt, seed=2, config=config)
        train_main_step(other, inputs, other_opt, seed=2, config=config)
        for k, v in state.main_weights.items():
            self.assertTrue(torch.equal(v, other.main_weights[k]), msg=k)
        self.assertEqual(state.step_counter, other.step_counter)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint('/nonexistent/ckpt.bin')

    def test_wrong_version(self):
        state = init_model(NetworkConfig(input_size=(16, 16),
                                         encoder_channels=(2, 4),
                                         transition_channels=4), seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'v.bin')
            save_checkpoint(path, state)
            payload = torch.load(path, weights_only=True)
            payload['format_version'] = 99
            torch.save(payload, path)
            with self.assertRaises(CutSegError):
                load_checkpoint(path)


if __name__ == '__main__':
    unittest.main()
