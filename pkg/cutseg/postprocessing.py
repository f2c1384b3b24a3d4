"""
Clean-up of predicted masks.

Two filters are available: a morphological opening that removes specks
smaller than the structuring element, and a modality gate that keeps only
mask pixels that are bright enough in a second image. Filters share the
`MaskFilter` interface and are built from a `PostprocConfig`.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from cutseg.data.images import Mask, quantize
from cutseg.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StructuringElement:
    """Square all-ones k x k structuring element.

    Even sizes are anchored at the top-left pixel of the central 2 x 2
    block.
    """
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise InvalidArgumentError(f'structuring element size must be a '
                                       f'positive int, got {self.size}')

    @property
    def footprint(self):
        return np.ones((self.size, self.size), dtype=bool)

    @property
    def origin(self):
        return 0 if self.size % 2 else -1


def morphological_open(mask, se):
    """Erosion followed by dilation with `se`.

    Pixels outside the image count as background for the erosion and are
    ignored by the dilation, so the result is the union of every placement
    of `se` that lies inside the image and inside the mask.

    Parameters
    ----------
    mask : Mask
    se : StructuringElement or int

    Returns
    -------
    opened : Mask
    """
    if not isinstance(se, StructuringElement):
        se = StructuringElement(se)
    opened = ndimage.binary_opening(mask.pixels, structure=se.footprint,
                                    origin=se.origin, border_value=0)
    return Mask(opened, mask.subject_id, mask.index)


def modality_gate(mask, gate_image, gate_threshold):
    """Keeps the mask pixels whose gate intensity (0-255 scale) is at least
    `gate_threshold`.

    Parameters
    ----------
    mask : Mask
    gate_image : Slice
    gate_threshold : int
      0-255

    Returns
    -------
    gated : Mask
    """
    if mask.shape != gate_image.shape:
        raise InvalidArgumentError(f'mask shape {mask.shape} does not match '
                                   f'gate image shape {gate_image.shape}')
    if not 0 <= gate_threshold <= 255:
        raise InvalidArgumentError(f'gate threshold must be in 0-255, got '
                                   f'{gate_threshold}')
    keep = quantize(gate_image.pixels) >= gate_threshold
    return Mask(mask.pixels & keep, mask.subject_id, mask.index)


class MaskFilter(object):
    """Base class for mask filters. Each filter should inherit from this
    class and override `apply`.
    """
    method = None

    def apply(self, mask, image=None):
        """Filters one mask; `image` is the slice the mask was predicted
        from (or the gate image)."""
        raise NotImplementedError

    def apply_all(self, masks, images=None):
        images = images if images is not None else [None] * len(masks)
        return [self.apply(m, i) for m, i in zip(masks, images)]


class NoFilter(MaskFilter):
    method = 'none'

    def apply(self, mask, image=None):
        return mask


class Opening(MaskFilter):
    method = 'opening'

    def __init__(self, se_size=5):
        self.se = StructuringElement(se_size)

    def apply(self, mask, image=None):
        return morphological_open(mask, self.se)


class ModalityGate(MaskFilter):
    method = 'gate'

    def __init__(self, gate_threshold=50):
        self.gate_threshold = gate_threshold

    def apply(self, mask, image=None):
        if image is None:
            raise InvalidArgumentError('modality gate needs a gate image')
        return modality_gate(mask, image, self.gate_threshold)


ALL_FILTERS = {cls.method: cls for cls in (NoFilter, Opening, ModalityGate)}


@dataclass
class PostprocConfig:
    """Post-processing selection.

    Parameters
    ----------
    method : str
      'none', 'opening' or 'gate'
    se_size : int
      structuring element size for 'opening'
    gate_threshold : int
      0-255 gate intensity for 'gate'
    gate_manifest : str, optional
      manifest of the gate images; the input slices are used when unset
    """
    method: str = 'none'
    se_size: int = 5
    gate_threshold: int = 50
    gate_manifest: Optional[str] = None

    def validate(self):
        violations = []
        if self.method not in ALL_FILTERS:
            violations.append(f'postproc.method must be one of '
                              f'{sorted(ALL_FILTERS)}, got {self.method!r}')
        if self.se_size < 1:
            violations.append(f'postproc.se_size must be >= 1, got '
                              f'{self.se_size}')
        if not 0 <= self.gate_threshold <= 255:
            violations.append('postproc.gate_threshold must be in 0-255, got '
                              f'{self.gate_threshold}')
        return violations

    def build(self):
        if self.method == 'opening':
            return Opening(self.se_size)
        if self.method == 'gate':
            return ModalityGate(self.gate_threshold)
        return NoFilter()
