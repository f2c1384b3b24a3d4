"""
Preprocessing of subject scans into network-ready slices.

Volumes are rescaled to [0, 1] over the whole 3D scan, cut into axial
slices, filtered for mostly-empty slices and brought to a 16-divisible
shape. `balance_sets` equalizes the sizes of the input and reference sets
by duplicating randomly chosen members of the smaller one.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from skimage.transform import resize

from cutseg.data.images import (SHAPE_MULTIPLE, ReferenceSet, Slice,
                                Volume)
from cutseg.data.manifests import (load_subject, read_mask_png,
                                   read_png_pixels)
from cutseg.errors import (EmptyResultError, InvalidArgumentError,
                           InvalidDataError, ManifestError)

logger = logging.getLogger(__name__)

AXIAL = 2


@dataclass
class PreprocessConfig:
    """How raw subject slices become network input.

    Parameters
    ----------
    normalize : bool
      rescale each subject's stack to [0, 1] over the whole volume
    min_nonzero_fraction : float
      slices with a smaller fraction of nonzero pixels are dropped
    target_size : tuple of 2 ints, optional
      bilinear resize target; when omitted slices are zero-padded up to the
      next multiple of 16
    """
    normalize: bool = True
    min_nonzero_fraction: float = 0.01
    target_size: Optional[Tuple[int, int]] = None

    def validate(self):
        violations = []
        if not 0 <= self.min_nonzero_fraction <= 1:
            violations.append('preprocess.min_nonzero_fraction must be in '
                              f'[0, 1], got {self.min_nonzero_fraction}')
        if self.target_size is not None:
            if (len(self.target_size) != 2 or
                    any(int(s) <= 0 or int(s) % SHAPE_MULTIPLE
                        for s in self.target_size)):
                violations.append(
                    'preprocess.target_size must be two positive multiples '
                    f'of {SHAPE_MULTIPLE}, got {self.target_size}')
        return violations


def normalize_volume(v):
    """Min-max rescales a volume to [0, 1] over all of its voxels.

    A constant volume maps to all zeros.

    Parameters
    ----------
    v : Volume

    Returns
    -------
    normalized : Volume
    """
    if not np.all(np.isfinite(v.voxels)):
        raise InvalidDataError(
            f'volume {v.subject_id!r} contains non-finite voxels')
    lo = v.voxels.min()
    hi = v.voxels.max()
    if hi == lo:
        scaled = np.zeros_like(v.voxels)
    else:
        scaled = (v.voxels - lo) / (hi - lo)
    return Volume(scaled, v.spacing, v.subject_id)


def _fit_shape(image, target_size, multiple):
    if target_size is not None:
        if image.shape == tuple(target_size):
            return image
        out = resize(image, target_size, order=1, mode='edge',
                     anti_aliasing=False, preserve_range=True)
        return np.clip(out, 0.0, 1.0)
    h, w = image.shape
    ph = -h % multiple
    pw = -w % multiple
    if not ph and not pw:
        return image
    return np.pad(image, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)),
                  mode='constant')


def extract_slices(v, axis=AXIAL, min_nonzero_fraction=0.01,
                   target_size=None, multiple=SHAPE_MULTIPLE):
    """Cuts a normalized volume into 2D slices along `axis`.

    Parameters
    ----------
    v : Volume
      normalized volume
    axis : int
      slicing axis; the last axis is axial
    min_nonzero_fraction : float
      keep slices whose fraction of nonzero pixels is at least this
    target_size : tuple of 2 ints, optional
      bilinear resize target (otherwise zero-pad to a multiple of 16)

    Returns
    -------
    slices : list of Slice
      ordered by slice index
    """
    voxels = np.moveaxis(v.voxels, axis, -1)
    out = []
    for k in range(voxels.shape[-1]):
        image = voxels[..., k]
        if np.count_nonzero(image) / image.size < min_nonzero_fraction:
            continue
        out.append(Slice(_fit_shape(image, target_size, multiple),
                         v.subject_id, k, multiple=multiple))
    if not out:
        raise EmptyResultError(
            f'no slice of {v.subject_id!r} has a nonzero fraction >= '
            f'{min_nonzero_fraction}')
    logger.debug('%s: kept %d of %d slices', v.subject_id, len(out),
                 voxels.shape[-1])
    return out


def balance_sets(inputs, reference, seed):
    """Pads the smaller of the two sets with random duplicates of its own
    members until both have the same length.

    Parameters
    ----------
    inputs : list of Slice
    reference : ReferenceSet
    seed : int

    Returns
    -------
    inputs, reference : list of Slice, ReferenceSet
      both of length max(len(inputs), len(reference)); originals come first
      and in their original order
    """
    inputs = list(inputs)
    if not inputs:
        raise InvalidArgumentError('input set must not be empty')
    if len(reference) == 0:
        raise InvalidArgumentError('reference set must not be empty')
    rng = np.random.default_rng(seed)
    members = list(reference)
    diff = len(members) - len(inputs)
    if diff > 0:
        picks = rng.integers(0, len(inputs), size=diff)
        inputs = inputs + [inputs[i] for i in picks]
    elif diff < 0:
        picks = rng.integers(0, len(members), size=-diff)
        members = members + [members[i] for i in picks]
        reference = ReferenceSet(members)
    if diff:
        logger.info('balanced sets to %d slices each (%d duplicates)',
                    len(inputs), abs(diff))
    return inputs, reference


def load_slices(record, preprocess=None):
    """Reads a subject's slices and runs them through the preprocessing
    chain.

    The slices are stacked into one volume so normalization happens over
    the whole scan; each resulting `Slice.index` is the slice's position in
    the manifest so predictions and masks stay aligned.

    Parameters
    ----------
    record : SubjectRecord
    preprocess : PreprocessConfig, optional

    Returns
    -------
    slices : list of Slice
    """
    preprocess = preprocess or PreprocessConfig()
    images = [read_png_pixels(p) for p in record.slice_paths]
    if not images:
        raise EmptyResultError(f'subject {record.subject_id!r} lists no '
                               'slices')
    volume = Volume(np.stack(images, axis=-1), subject_id=record.subject_id)
    if preprocess.normalize:
        volume = normalize_volume(volume)
    return extract_slices(volume, AXIAL, preprocess.min_nonzero_fraction,
                          preprocess.target_size)


def load_masks(record, preprocess=None):
    """Reads a subject's masks, resized the same way as its slices.

    Returns
    -------
    masks : dict
      maps slice index to Mask
    """
    if record.mask_paths is None:
        return {}
    preprocess = preprocess or PreprocessConfig()
    masks = {}
    for i, p in enumerate(record.mask_paths):
        mask = read_mask_png(p, record.subject_id, i)
        pixels = mask.pixels.astype(np.float64)
        if preprocess.target_size is None:
            pixels = _fit_shape(pixels, None, SHAPE_MULTIPLE)
        elif mask.shape != tuple(preprocess.target_size):
            pixels = resize(pixels, preprocess.target_size, order=0,
                            anti_aliasing=False, preserve_range=True)
        masks[i] = type(mask)(pixels > 0.5, mask.subject_id, mask.index)
    return masks


def load_dataset(manifest_paths, preprocess=None):
    """Loads and preprocesses the slices of several subject manifests.

    Returns
    -------
    slices : list of Slice
      subjects in the given order, each in slice order
    """
    slices = []
    for path in manifest_paths:
        slices.extend(load_slices(load_subject(path), preprocess))
    if not slices:
        raise EmptyResultError('no slices in the given manifests')
    logger.info('loaded %d slices from %d manifests', len(slices),
                len(manifest_paths))
    return slices


def load_dataset_masks(manifest_paths, preprocess=None):
    """Loads the masks of several subject manifests.

    Returns
    -------
    masks : dict
      maps (subject_id, index) to Mask
    """
    masks = {}
    for path in manifest_paths:
        record = load_subject(path)
        if record.mask_paths is None:
            raise ManifestError(f'{path}: manifest lists no masks')
        for mask in load_masks(record, preprocess).values():
            masks[mask.key] = mask
    return masks
