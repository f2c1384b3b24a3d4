import unittest
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cutseg.data.images import Mask, Slice
from cutseg.errors import InvalidArgumentError
from cutseg.postprocessing import (ModalityGate, NoFilter, Opening,
                                   PostprocConfig, StructuringElement,
                                   modality_gate, morphological_open)


def fitted_windows(mask, k):
    """Union of every k x k window that lies inside the image and whose
    pixels are all foreground."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            if mask[i:i + k, j:j + k].all():
                out[i:i + k, j:j + k] = True
    return out


class TestOpening(unittest.TestCase):
    """Tests of the morphological opening."""

    def test_isolated_pixel_removed(self):
        m = np.zeros((16, 16), dtype=bool)
        m[7, 7] = True
        self.assertEqual(morphological_open(Mask(m), 5).area, 0)

    def test_block_kept(self):
        m = np.zeros((16, 16), dtype=bool)
        m[3:13, 3:13] = True
        opened = morphological_open(Mask(m, 's', 2), StructuringElement(5))
        np.testing.assert_array_equal(opened.pixels, m)
        self.assertEqual(opened.key, ('s', 2))

    def test_block_at_border_kept(self):
        m = np.zeros((16, 16), dtype=bool)
        m[:6, :6] = True
        np.testing.assert_array_equal(morphological_open(Mask(m), 5).pixels,
                                      m)

    def test_even_size(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:6, 2:6] = True
        m[0, :] = True
        np.testing.assert_array_equal(morphological_open(Mask(m), 4).pixels,
                                      fitted_windows(m, 4))

    def test_random_against_windows(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            m = rng.uniform(size=(32, 32)) < rng.uniform(0.3, 0.9)
            for k in (3, 5):
                opened = morphological_open(Mask(m), k)
                np.testing.assert_array_equal(opened.pixels,
                                              fitted_windows(m, k),
                                              err_msg=f'trial {trial} k {k}')

    @given(arrays(bool, (12, 12)), st.integers(1, 6))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_shrinking(self, m, k):
        once = morphological_open(Mask(m), k)
        twice = morphological_open(once, k)
        np.testing.assert_array_equal(once.pixels, twice.pixels)
        self.assertFalse(np.any(once.pixels & ~m))

    def test_bad_size(self):
        with self.assertRaises(InvalidArgumentError):
            StructuringElement(0)


class TestGate(unittest.TestCase):

    def test_gate(self):
        mask = Mask(np.ones((16, 16), dtype=bool))
        pixels = np.full((16, 16), 0.2)
        pixels[:, 8:] = 0.19
        gated = modality_gate(mask, Slice(pixels), 50)
        self.assertTrue(gated.pixels[:, :8].all())
        self.assertFalse(gated.pixels[:, 8:].any())

    def test_gate_shape(self):
        with self.assertRaises(InvalidArgumentError):
            modality_gate(Mask(np.ones((16, 16))), Slice(np.ones((32, 16))),
                          50)

    def test_gate_needs_image(self):
        with self.assertRaises(InvalidArgumentError):
            ModalityGate(50).apply(Mask(np.ones((16, 16))))


class TestPostprocConfig(unittest.TestCase):

    def test_build(self):
        self.assertIsInstance(PostprocConfig().build(), NoFilter)
        opening = PostprocConfig(method='opening', se_size=3).build()
        self.assertIsInstance(opening, Opening)
        self.assertEqual(opening.se.size, 3)
        self.assertIsInstance(PostprocConfig(method='gate').build(),
                              ModalityGate)

    def test_validate(self):
        self.assertEqual(PostprocConfig().validate(), [])
        bad = PostprocConfig(method='close', se_size=0, gate_threshold=300)
        self.assertEqual(len(bad.validate()), 3)

    def test_apply_all(self):
        m = np.zeros((16, 16), dtype=bool)
        m[0, 0] = True
        masks = [Mask(m, 'a', i) for i in range(3)]
        out = Opening(3).apply_all(masks)
        self.assertEqual([x.key for x in out], [('a', 0), ('a', 1),
                                                ('a', 2)])
        self.assertTrue(all(x.area == 0 for x in out))


if __name__ == '__main__':
    unittest.main()
