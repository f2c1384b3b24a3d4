"""
Synthetic phantom slices standing in for medical scans.

Each phantom is a dark background with one mid-intensity elliptical
"organ". Anomalous phantoms add a single disk strictly inside the organ,
bright by default (tumor-like) or dark (lesion-like), and come with the
exact mask of the disk.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from cutseg.data.images import SHAPE_MULTIPLE, Mask, Slice
from cutseg.data.manifests import (SubjectRecord, write_manifest,
                                   write_mask_png, write_slice_png)
from cutseg.errors import InvalidArgumentError, PhantomGenerationError

logger = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 200

# disk intensity when `anomaly_brightness` is not given
ANOMALY_INTENSITY = {'bright': 0.95, 'dark': 0.15}


@dataclass
class PhantomSpec:
    """Geometry and contrast of the phantom corpus.

    Radii are fractions of `image_size`.

    Parameters
    ----------
    image_size : int
      side length in pixels, a multiple of 16
    organ_radius_range : (float, float)
      range of the organ's semi-axes
    anomaly_radius_range : (float, float)
      range of the anomaly disk radius
    anomaly_brightness : float, optional
      intensity of the anomaly disk, in (0, 1]; above `organ_intensity`
      for bright anomalies and below it for dark ones. Defaults to
      ANOMALY_INTENSITY[anomaly_polarity]
    noise_std : float
      standard deviation of additive Gaussian noise
    organ_intensity, background_intensity : float
    anomaly_polarity : {'bright', 'dark'}
      whether the disk is brighter or darker than the organ
    """
    image_size: int = 64
    organ_radius_range: Tuple[float, float] = (0.28, 0.40)
    anomaly_radius_range: Tuple[float, float] = (0.06, 0.12)
    anomaly_brightness: Optional[float] = None
    noise_std: float = 0.05
    organ_intensity: float = 0.5
    background_intensity: float = 0.0
    anomaly_polarity: str = 'bright'

    @property
    def anomaly_intensity(self):
        if self.anomaly_brightness is not None:
            return self.anomaly_brightness
        return ANOMALY_INTENSITY.get(self.anomaly_polarity,
                                     ANOMALY_INTENSITY['bright'])

    def validate(self):
        violations = []
        if self.image_size <= 0 or self.image_size % SHAPE_MULTIPLE:
            violations.append(f'phantom.image_size must be a positive '
                              f'multiple of {SHAPE_MULTIPLE}, got '
                              f'{self.image_size}')
        for name in ('organ_radius_range', 'anomaly_radius_range'):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                violations.append(f'phantom.{name} must satisfy '
                                  f'0 < low <= high, got {(lo, hi)}')
        intensity = self.anomaly_intensity
        if not 0 < intensity <= 1:
            violations.append('phantom.anomaly_brightness must be in (0, 1], '
                              f'got {intensity}')
        elif self.anomaly_polarity == 'bright' and \
                intensity <= self.organ_intensity:
            violations.append(f'a bright anomaly ({intensity}) must be '
                              f'brighter than the organ '
                              f'({self.organ_intensity})')
        elif self.anomaly_polarity == 'dark' and \
                intensity >= self.organ_intensity:
            violations.append(f'a dark anomaly ({intensity}) must be '
                              f'darker than the organ '
                              f'({self.organ_intensity})')
        if self.noise_std < 0:
            violations.append(f'phantom.noise_std must be >= 0, got '
                              f'{self.noise_std}')
        for name in ('organ_intensity', 'background_intensity'):
            if not 0 <= getattr(self, name) <= 1:
                violations.append(f'phantom.{name} must be in [0, 1]')
        if self.anomaly_polarity not in ('bright', 'dark'):
            violations.append("phantom.anomaly_polarity must be 'bright' or "
                              f"'dark', got {self.anomaly_polarity!r}")
        return violations


def _ellipse_level(xx, yy, cx, cy, a, b, theta):
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2


def generate_phantom(spec, with_anomaly, seed, subject_id='phantom',
                     index=0):
    """Draws one phantom slice and its anomaly mask.

    Parameters
    ----------
    spec : PhantomSpec
    with_anomaly : bool
    seed : int

    Returns
    -------
    image, mask : Slice, Mask
      the mask is empty when `with_anomaly` is False
    """
    violations = spec.validate()
    if violations:
        raise PhantomGenerationError('; '.join(violations))
    rng = np.random.default_rng(seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    a, b = rng.uniform(*spec.organ_radius_range, size=2) * n
    cx, cy = n / 2 + rng.uniform(-0.05, 0.05, size=2) * n
    theta = rng.uniform(0, np.pi)
    level = _ellipse_level(xx, yy, cx, cy, a, b, theta)

    pixels = np.full((n, n), spec.background_intensity, dtype=np.float64)
    pixels[level < 1] = spec.organ_intensity
    disk = np.zeros((n, n), dtype=bool)

    if with_anomaly:
        r = rng.uniform(*spec.anomaly_radius_range) * n
        shrink = 1 - r / min(a, b)
        if shrink <= 0:
            raise PhantomGenerationError(
                f'anomaly radius {r:.1f}px does not fit inside an organ with '
                f'semi-axes {a:.1f}px, {b:.1f}px')
        for _ in range(MAX_PLACEMENT_TRIES):
            rho = shrink * np.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * np.pi)
            u, v = rho * a * np.cos(phi), rho * b * np.sin(phi)
            dx = cx + u * np.cos(theta) - v * np.sin(theta)
            dy = cy + u * np.sin(theta) + v * np.cos(theta)
            disk = (xx - dx) ** 2 + (yy - dy) ** 2 <= r ** 2
            if disk.any() and np.all(level[disk] < 1):
                break
        else:
            raise PhantomGenerationError(
                f'could not place an anomaly of radius {r:.1f}px strictly '
                f'inside the organ (seed {seed})')
        pixels[disk] = spec.anomaly_intensity

    if spec.noise_std > 0:
        pixels = pixels + rng.normal(0, spec.noise_std, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    return (Slice(pixels, subject_id, index),
            Mask(disk, subject_id, index))


def _phantom_seed(seed, kind, i):
    return int(np.random.SeedSequence([seed, kind, i]).generate_state(1)[0])


def write_phantom_corpus(out_dir, spec, n, seed):
    """Writes `n` normal and `n` anomalous phantoms with manifests.

    Layout::

        out_dir/normal/0000.png ...
        out_dir/anomalous/0000.png ...
        out_dir/anomalous_masks/0000.png ...
        out_dir/normal.json
        out_dir/anomalous.json

    Returns
    -------
    normal_manifest, anomalous_manifest : str
    """
    if n < 1:
        raise InvalidArgumentError(f'need at least one phantom, got n={n}')
    paths = {}
    for kind, name in enumerate(('normal', 'anomalous')):
        img_dir = os.path.join(out_dir, name)
        os.makedirs(img_dir, exist_ok=True)
        mask_dir = None
        if name == 'anomalous':
            mask_dir = os.path.join(out_dir, 'anomalous_masks')
            os.makedirs(mask_dir, exist_ok=True)
        slices, masks = [], []
        for i in range(n):
            image, mask = generate_phantom(spec, name == 'anomalous',
                                           _phantom_seed(seed, kind, i),
                                           subject_id=name, index=i)
            slices.append(os.path.join(img_dir, f'{i:04d}.png'))
            write_slice_png(image, slices[-1])
            if mask_dir is not None:
                masks.append(os.path.join(mask_dir, f'{i:04d}.png'))
                write_mask_png(mask, masks[-1])
        record = SubjectRecord(name, slices, masks if mask_dir else None,
                               modality='phantom')
        paths[name] = os.path.join(out_dir, f'{name}.json')
        write_manifest(record, paths[name])
        logger.info('wrote %d %s phantoms to %s', n, name, img_dir)
    return paths['normal'], paths['anomalous']
