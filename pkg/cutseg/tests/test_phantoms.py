import json
import os
import tempfile
import unittest
import numpy as np

from cutseg.data.images import Mask, quantize
from cutseg.data.manifests import (load_subject, read_mask_png,
                                   read_slice_png)
from cutseg.data.phantoms import (PhantomSpec, _ellipse_level,
                                  generate_phantom, write_phantom_corpus)
from cutseg.errors import InvalidArgumentError, PhantomGenerationError
from cutseg.thresholding import DarkRule, HistogramConfig, segment_dataset


class TestGeneratePhantom(unittest.TestCase):
    """Tests of the synthetic phantom generator."""

    def test_normal_phantom_has_empty_mask(self):
        image, mask = generate_phantom(PhantomSpec(), False, seed=1)
        self.assertEqual(mask.area, 0)
        self.assertEqual(image.shape, (64, 64))

    def test_anomaly_intensity_without_noise(self):
        spec = PhantomSpec(noise_std=0)
        image, mask = generate_phantom(spec, True, seed=2)
        self.assertGreater(mask.area, 0)
        np.testing.assert_array_equal(image.pixels[mask.pixels],
                                      np.float32(spec.anomaly_intensity))

    def test_dark_anomaly(self):
        spec = PhantomSpec(noise_std=0, anomaly_polarity='dark')
        for seed in range(10):
            image, mask = generate_phantom(spec, True, seed=seed)
            inside = image.pixels[mask.pixels]
            self.assertGreater(mask.area, 0)
            self.assertTrue(np.all(inside < spec.organ_intensity))
            self.assertTrue(np.all(inside > spec.background_intensity))
            # the disk is the only dark spot inside the organ
            organ = image.pixels > 0
            np.testing.assert_array_equal(
                organ & (image.pixels < spec.organ_intensity), mask.pixels)

    def test_contrast_follows_polarity(self):
        self.assertEqual(PhantomSpec().anomaly_intensity, 0.95)
        self.assertEqual(PhantomSpec(anomaly_polarity='dark')
                         .anomaly_intensity, 0.15)
        self.assertEqual(PhantomSpec(anomaly_polarity='dark',
                                     anomaly_brightness=0.3).validate(), [])
        self.assertEqual(len(PhantomSpec(anomaly_polarity='dark',
                                         anomaly_brightness=0.9)
                             .validate()), 1)
        self.assertEqual(len(PhantomSpec(anomaly_brightness=0.4)
                             .validate()), 1)
        with self.assertRaises(PhantomGenerationError):
            generate_phantom(PhantomSpec(anomaly_polarity='dark',
                                         anomaly_brightness=0.7), True, 0)

    def test_deterministic(self):
        a, ma = generate_phantom(PhantomSpec(), True, seed=5)
        b, mb = generate_phantom(PhantomSpec(), True, seed=5)
        self.assertEqual(a.pixels.tobytes(), b.pixels.tobytes())
        np.testing.assert_array_equal(ma.pixels, mb.pixels)

    def test_anomaly_inside_organ(self):
        spec = PhantomSpec(noise_std=0, background_intensity=0.0)
        for seed in range(20):
            image, mask = generate_phantom(spec, True, seed=seed)
            # the organ is the set of non-background pixels
            organ = image.pixels > 0
            self.assertTrue(np.all(organ[mask.pixels]))

    def test_values_in_range(self):
        image, _ = generate_phantom(PhantomSpec(noise_std=0.5), True, seed=3)
        self.assertGreaterEqual(image.pixels.min(), 0)
        self.assertLessEqual(image.pixels.max(), 1)

    def test_anomaly_too_large(self):
        spec = PhantomSpec(organ_radius_range=(0.1, 0.1),
                           anomaly_radius_range=(0.2, 0.2))
        with self.assertRaises(PhantomGenerationError):
            generate_phantom(spec, True, seed=0)

    def test_spec_validation(self):
        self.assertEqual(PhantomSpec().validate(), [])
        bad = PhantomSpec(image_size=40, anomaly_radius_range=(0.2, 0.1),
                          anomaly_polarity='grey')
        self.assertEqual(len(bad.validate()), 3)

    def test_ellipse_level(self):
        xx = np.array([0.0, 2.0, 0.0])
        yy = np.array([0.0, 0.0, 1.0])
        level = _ellipse_level(xx, yy, 0, 0, 2, 1, 0)
        np.testing.assert_allclose(level, [0, 1, 1])


class TestDarkCorpus(unittest.TestCase):
    """Dark phantoms segmented with the dark rule inside the organ."""

    def test_dark_rule_recovers_disks(self):
        spec = PhantomSpec(noise_std=0, anomaly_polarity='dark')
        images, truth, rois = [], [], {}
        for i in range(6):
            image, mask = generate_phantom(spec, True, seed=40 + i,
                                           subject_id='dark', index=i)
            images.append(image)
            truth.append(mask)
            rois[image.key] = Mask(image.pixels > 0, 'dark', i)
        result = segment_dataset(images, DarkRule(),
                                 HistogramConfig(smooth_window=1), rois)
        # leftmost peak is the disk at bin 38, applied on the inverted image
        self.assertEqual(result.peaks.bins, [38, 128])
        self.assertEqual(result.thresholds, {'*': 255 - 38})
        for predicted, expected in zip(result.masks, truth):
            np.testing.assert_array_equal(predicted.pixels, expected.pixels)

    def test_corpus_writes_dark_disks(self):
        spec = PhantomSpec(noise_std=0, anomaly_polarity='dark')
        with tempfile.TemporaryDirectory() as tmp:
            _, anomalous = write_phantom_corpus(tmp, spec, 2, seed=3)
            record = load_subject(anomalous)
            for image_path, mask_path in zip(record.slice_paths,
                                             record.mask_paths):
                pixels = quantize(read_slice_png(image_path).pixels)
                disk = read_mask_png(mask_path).pixels
                self.assertTrue(np.all(pixels[disk] == 38))
                self.assertTrue(np.all(pixels[~disk] != 38))


class TestPhantomCorpus(unittest.TestCase):

    def test_layout_and_manifests(self):
        with tempfile.TemporaryDirectory() as tmp:
            normal, anomalous = write_phantom_corpus(tmp, PhantomSpec(), 3,
                                                     seed=7)
            rec_n = load_subject(normal)
            rec_a = load_subject(anomalous)
            self.assertEqual(len(rec_n.slice_paths), 3)
            self.assertIsNone(rec_n.mask_paths)
            self.assertEqual(len(rec_a.mask_paths), 3)
            with open(anomalous) as f:
                data = json.load(f)
            self.assertFalse(os.path.isabs(data['slices'][0]))

    def test_byte_reproducible(self):
        with tempfile.TemporaryDirectory() as a, \
                tempfile.TemporaryDirectory() as b:
            write_phantom_corpus(a, PhantomSpec(), 2, seed=7)
            write_phantom_corpus(b, PhantomSpec(), 2, seed=7)
            for sub in ('normal', 'anomalous', 'anomalous_masks'):
                for name in sorted(os.listdir(os.path.join(a, sub))):
                    with open(os.path.join(a, sub, name), 'rb') as fa, \
                            open(os.path.join(b, sub, name), 'rb') as fb:
                        self.assertEqual(fa.read(), fb.read())

    def test_needs_one_phantom(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(InvalidArgumentError):
                write_phantom_corpus(tmp, PhantomSpec(), 0, seed=0)


if __name__ == '__main__':
    unittest.main()
