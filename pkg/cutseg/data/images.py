"""
Image value types shared by every stage of the pipeline.

A `Volume` is a raw subject scan, a `Slice` is one normalized 2D image
(the unit of all network input and output), a `Mask` is a binary grid
aligned with a slice and a `ReferenceSet` is the collection of normal
slices that defines what "normal" means for a run.

Every constructor checks its invariants, so any `Slice` or `Mask` that
exists satisfies them.
"""
from dataclasses import dataclass, field

import numpy as np

from cutseg.errors import InvalidArgumentError, InvalidDataError

SHAPE_MULTIPLE = 16


def quantize(pixels):
    """Maps intensities in [0, 1] onto the 0-255 scale used by histograms,
    thresholds and PNG files."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255),
                   0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Volume:
    """A raw 3D scan.

    Parameters
    ----------
    voxels : array of numerics, shape (H, W, D)
      intensities in arbitrary units; the last axis is the axial axis
    spacing : tuple of 3 floats
      voxel spacing in mm (metadata only)
    subject_id : str
    """
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ''

    def __post_init__(self):
        voxels = np.asarray(self.voxels, dtype=np.float64)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise InvalidDataError(
                f'volume {self.subject_id!r} must be 3D with every dimension '
                f'>= 1, got shape {voxels.shape}')
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidDataError(
                f'volume {self.subject_id!r} needs 3 positive spacings, got '
                f'{self.spacing}')
        object.__setattr__(self, 'voxels', voxels)
        object.__setattr__(self, 'spacing', tuple(float(s)
                                                  for s in self.spacing))

    @property
    def n_slices(self):
        return self.voxels.shape[2]


@dataclass(frozen=True, eq=False)
class Slice:
    """One 2D grayscale image with intensities in [0, 1].

    Height and width must both be divisible by 16 so that the four 2x2
    poolings of the encoder are exact.
    """
    pixels: np.ndarray
    subject_id: str = ''
    index: int = 0
    multiple: int = field(default=SHAPE_MULTIPLE, repr=False, compare=False)

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float32)
        if pixels.ndim != 2:
            raise InvalidDataError(
                f'slice {self.subject_id}:{self.index} must be 2D, got shape '
                f'{pixels.shape}')
        h, w = pixels.shape
        if h < 1 or w < 1 or h % self.multiple or w % self.multiple:
            raise InvalidDataError(
                f'slice {self.subject_id}:{self.index} has shape {(h, w)}; '
                f'both sides must be positive multiples of {self.multiple}')
        if not np.all(np.isfinite(pixels)):
            raise InvalidDataError(
                f'slice {self.subject_id}:{self.index} has non-finite pixels')
        if pixels.min() < 0 or pixels.max() > 1:
            raise InvalidDataError(
                f'slice {self.subject_id}:{self.index} has pixels outside '
                f'[0, 1] (min {pixels.min()}, max {pixels.max()})')
        if self.index < 0:
            raise InvalidDataError(f'slice index must be >= 0, got '
                                   f'{self.index}')
        pixels.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def key(self):
        return (self.subject_id, self.index)


@dataclass(frozen=True, eq=False)
class Mask:
    """A binary grid aligned with a slice (prediction or ground truth)."""
    pixels: np.ndarray
    subject_id: str = ''
    index: int = 0

    def __post_init__(self):
        raw = np.asarray(self.pixels)
        if raw.ndim != 2:
            raise InvalidDataError(f'mask must be 2D, got shape {raw.shape}')
        if raw.dtype != bool:
            if not np.all(np.isin(raw, (0, 1))):
                raise InvalidDataError(
                    f'mask {self.subject_id}:{self.index} is not binary')
            raw = raw.astype(bool)
        raw = raw.copy()
        raw.setflags(write=False)
        object.__setattr__(self, 'pixels', raw)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def key(self):
        return (self.subject_id, self.index)

    @property
    def area(self):
        return int(self.pixels.sum())

    @classmethod
    def empty_like(cls, image):
        return cls(np.zeros(image.shape, dtype=bool), image.subject_id,
                   image.index)


@dataclass(frozen=True)
class ReferenceSet:
    """Ordered, non-empty collection of normal slices."""
    slices: tuple

    def __post_init__(self):
        slices = tuple(self.slices)
        if not slices:
            raise InvalidArgumentError('reference set must not be empty')
        for s in slices:
            if not isinstance(s, Slice):
                raise InvalidDataError(
                    f'reference members must be Slice, got {type(s).__name__}')
        object.__setattr__(self, 'slices', slices)

    def __len__(self):
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    def __getitem__(self, i):
        return self.slices[i]

    @property
    def m(self):
        return len(self.slices)
