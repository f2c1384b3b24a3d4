"""
Histogram-peak thresholding of reconstructed images.

The reduced reconstructions have a histogram with a handful of separated
peaks. Bright anomalies sit in the rightmost peak, dark anomalies in the
leftmost one, so the threshold is read off a peak of the histogram pooled
over the whole dataset (or per subject).

Threshold rules follow one template: each rule inherits from
`ThresholdRule` and overrides `pick_peak`, `prepare` and
`working_threshold`. `prepare` maps a reconstruction into the space the
threshold is applied in (identity for bright anomalies, region-of-interest
masking plus inversion for dark ones).
"""
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from cutseg.data.images import Mask, quantize
from cutseg.errors import (InvalidArgumentError, MissingROIError,
                           NoThresholdError)

logger = logging.getLogger(__name__)

N_BINS = 256

Peak = namedtuple('Peak', ['bin', 'count', 'prominence'])


@dataclass
class HistogramConfig:
    """Peak detection and termination parameters.

    Parameters
    ----------
    smooth_window : int
      odd width of the centered moving average
    min_prominence_fraction : float
      minimum peak prominence as a fraction of the histogram total
    min_separation : int
      peaks closer than this many bins are merged (the taller one wins)
    min_peaks : int
      peak count at which training may stop
    eval_subset_size : int
      number of input slices whose reconstructions form the histogram
      checked between cycles
    """
    smooth_window: int = 5
    min_prominence_fraction: float = 0.001
    min_separation: int = 10
    min_peaks: int = 3
    eval_subset_size: int = 64

    def validate(self):
        violations = []
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            violations.append('histogram.smooth_window must be a positive odd '
                              f'int, got {self.smooth_window}')
        if self.min_prominence_fraction < 0:
            violations.append('histogram.min_prominence_fraction must be '
                              '>= 0')
        if self.min_separation < 0:
            violations.append('histogram.min_separation must be >= 0')
        if self.min_peaks < 1:
            violations.append('histogram.min_peaks must be >= 1')
        if self.eval_subset_size < 1:
            violations.append('histogram.eval_subset_size must be >= 1')
        return violations


@dataclass
class Histogram256:
    """256-bin intensity histogram; bin b counts pixels whose intensity
    rounds to b on the 0-255 scale."""
    counts: np.ndarray = field(
        default_factory=lambda: np.zeros(N_BINS, dtype=np.int64))

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (N_BINS,) or (counts < 0).any():
            raise InvalidArgumentError('histogram needs 256 non-negative '
                                       'counts')
        self.counts = counts

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return Histogram256(self.counts + other.counts)

    def inverted(self):
        return Histogram256(self.counts[::-1].copy())

    def to_frame(self):
        return pd.DataFrame({'bin': np.arange(N_BINS), 'count': self.counts})

    def to_csv(self, path):
        """Writes 256 headerless `bin,count` rows."""
        self.to_frame().to_csv(path, index=False, header=False,
                               lineterminator='\n')

    @classmethod
    def from_csv(cls, path):
        frame = pd.read_csv(path, header=None, names=['bin', 'count'])
        counts = np.zeros(N_BINS, dtype=np.int64)
        counts[frame['bin'].to_numpy()] = frame['count'].to_numpy()
        return cls(counts)


@dataclass
class PeakList:
    """Detected peaks ordered by bin."""
    peaks: List[Peak] = field(default_factory=list)

    def __len__(self):
        return len(self.peaks)

    def __iter__(self):
        return iter(self.peaks)

    def __getitem__(self, i):
        return self.peaks[i]

    @property
    def bins(self):
        return [p.bin for p in self.peaks]


def compute_histogram(slices, roi=None):
    """Pools the 0-255 histogram of a list of slices.

    Parameters
    ----------
    slices : list of Slice
    roi : list of Mask, optional
      only pixels inside the matching mask contribute

    Returns
    -------
    histogram : Histogram256
    """
    slices = list(slices)
    if roi is not None:
        roi = list(roi)
        if len(roi) != len(slices):
            raise InvalidArgumentError(
                f'{len(slices)} slices but {len(roi)} ROI masks')
    counts = np.zeros(N_BINS, dtype=np.int64)
    for k, image in enumerate(slices):
        bins = quantize(image.pixels)
        if roi is not None:
            if roi[k].shape != image.shape:
                raise InvalidArgumentError(
                    f'ROI shape {roi[k].shape} does not match slice shape '
                    f'{image.shape}')
            bins = bins[roi[k].pixels]
        counts += np.bincount(bins.ravel(), minlength=N_BINS)
    return Histogram256(counts)


def smooth_counts(counts, window):
    """Centered moving average; edge bins average over the bins that exist.
    """
    if window < 1 or window % 2 == 0:
        raise InvalidArgumentError(f'smooth window must be odd, got {window}')
    kernel = np.ones(window)
    sums = np.convolve(np.asarray(counts, dtype=np.float64), kernel, 'same')
    sizes = np.convolve(np.ones(len(counts)), kernel, 'same')
    return sums / sizes


def _prominence(s, i):
    refs = []
    if i > 0:
        left = s[:i][::-1]
        higher = np.flatnonzero(left > s[i])
        stop = higher[0] if len(higher) else len(left)
        refs.append(left[:stop].min())
    if i < len(s) - 1:
        right = s[i + 1:]
        higher = np.flatnonzero(right > s[i])
        stop = higher[0] if len(higher) else len(right)
        refs.append(right[:stop].min())
    return s[i] - (max(refs) if refs else 0.0)


def detect_peaks(h, smooth_window=5, min_prominence_fraction=0.001,
                 min_separation=10):
    """Finds the separated, prominent peaks of a histogram.

    Counts are smoothed with a centered moving average. A peak is a strict
    local maximum of the smoothed counts (an edge bin only needs to beat
    its single neighbour) whose prominence reaches
    `min_prominence_fraction * total`. Of two peaks closer than
    `min_separation` bins only the taller survives.

    Parameters
    ----------
    h : Histogram256
    smooth_window : int
    min_prominence_fraction : float
    min_separation : int

    Returns
    -------
    peaks : PeakList
    """
    total = h.total
    if total == 0:
        raise InvalidArgumentError('cannot detect peaks of an empty '
                                   'histogram')
    s = smooth_counts(h.counts, smooth_window)
    rising = np.r_[True, s[1:] > s[:-1]]
    falling = np.r_[s[:-1] > s[1:], True]
    candidates = np.flatnonzero(rising & falling)
    floor = min_prominence_fraction * total
    prominences = {int(i): _prominence(s, i) for i in candidates}
    kept = [i for i in prominences if prominences[i] >= floor]

    accepted = []
    for i in sorted(kept, key=lambda j: (-s[j], j)):
        if all(abs(i - j) >= min_separation for j in accepted):
            accepted.append(i)
    peaks = PeakList([Peak(i, int(h.counts[i]), float(prominences[i]))
                      for i in sorted(accepted)])
    logger.debug('peaks at bins %s', peaks.bins)
    return peaks


class ThresholdRule(object):
    """Base class for threshold rules. Each rule should inherit from this
    class and override `pick_peak`, `prepare` and `working_threshold`.

    Parameters
    ----------
    threshold_override : int, optional
      fixed threshold (0-255) in the rule's working space; bypasses peak
      detection
    roi_required : bool
      a region of interest must be supplied and the final mask is
      restricted to it
    """
    polarity = None
    roi_default = False

    def __init__(self, threshold_override=None, roi_required=None):
        if threshold_override is not None:
            threshold_override = int(threshold_override)
            if not 0 <= threshold_override <= 255:
                raise InvalidArgumentError(
                    f'threshold override must be in 0-255, got '
                    f'{threshold_override}')
        self.threshold_override = threshold_override
        self.roi_required = (self.roi_default if roi_required is None
                             else bool(roi_required))

    def pick_peak(self, peaks):
        """Returns the bin of the peak that marks the anomaly cluster."""
        raise NotImplementedError

    def prepare(self, pixels, roi=None):
        """Maps reconstruction pixels into the thresholding space."""
        raise NotImplementedError

    def working_threshold(self, t):
        """Converts a histogram-space bin into the thresholding space."""
        raise NotImplementedError

    def to_dict(self):
        return {'polarity': self.polarity,
                'threshold_override': self.threshold_override,
                'roi_required': self.roi_required}

    def __repr__(self):
        return (f'{type(self).__name__}(threshold_override='
                f'{self.threshold_override}, roi_required='
                f'{self.roi_required})')


class BrightRule(ThresholdRule):
    """Bright anomalies: threshold at the rightmost peak."""
    polarity = 'bright'

    def pick_peak(self, peaks):
        return peaks[-1].bin

    def prepare(self, pixels, roi=None):
        return pixels

    def working_threshold(self, t):
        return t


class DarkRule(ThresholdRule):
    """Dark anomalies: the leftmost peak marks them. Pixels outside the
    region of interest are zeroed and the image is inverted, so the
    threshold is applied as a bright threshold on the inverted image."""
    polarity = 'dark'
    roi_default = True

    def pick_peak(self, peaks):
        return peaks[0].bin

    def prepare(self, pixels, roi=None):
        if roi is not None:
            pixels = np.where(roi.pixels, pixels, 0.0).astype(pixels.dtype)
        return 1.0 - pixels

    def working_threshold(self, t):
        return 255 - t


ALL_RULES = {'bright': BrightRule, 'dark': DarkRule}


def make_rule(polarity='bright', threshold_override=None, roi_required=None):
    try:
        cls = ALL_RULES[polarity]
    except KeyError:
        raise InvalidArgumentError(
            f'polarity must be one of {sorted(ALL_RULES)}, got {polarity!r}')
    return cls(threshold_override, roi_required)


def select_threshold(peaks, rule):
    """Picks the threshold bin from detected peaks.

    The override wins when set; otherwise bright rules take the rightmost
    peak and dark rules the leftmost one.
    """
    if rule.threshold_override is not None:
        return rule.threshold_override
    if len(peaks) == 0:
        raise NoThresholdError('no histogram peak found; pass an explicit '
                               'threshold')
    return int(rule.pick_peak(peaks))


def apply_threshold(image, t, rule, roi=None):
    """Binarizes one reconstruction.

    Parameters
    ----------
    image : Slice
      reconstruction I_ro
    t : int
      threshold (0-255) in the rule's working space; pixels whose prepared
      intensity rounds to at least `t` are foreground
    rule : ThresholdRule
    roi : Mask, optional

    Returns
    -------
    mask : Mask
    """
    if not 0 <= t <= 255:
        raise InvalidArgumentError(f'threshold must be in 0-255, got {t}')
    if rule.roi_required and roi is None:
        raise MissingROIError(f'{rule.polarity} rule requires a region of '
                              f'interest for {image.subject_id}:'
                              f'{image.index}')
    if roi is not None and roi.shape != image.shape:
        raise InvalidArgumentError('ROI shape does not match the image')
    prepared = rule.prepare(image.pixels, roi)
    fg = quantize(prepared) >= t
    if rule.roi_required:
        fg &= roi.pixels
    return Mask(fg, image.subject_id, image.index)


def resolve_threshold(histogram, rule, config):
    """Threshold in the rule's working space for a pooled histogram.

    Returns
    -------
    t : int
    peaks : PeakList or None
      None when the override was used
    """
    if rule.threshold_override is not None:
        return rule.threshold_override, None
    if histogram.total == 0:
        raise NoThresholdError('histogram is empty; pass an explicit '
                               'threshold')
    peaks = detect_peaks(histogram, config.smooth_window,
                         config.min_prominence_fraction,
                         config.min_separation)
    return rule.working_threshold(select_threshold(peaks, rule)), peaks


@dataclass
class SegmentationResult:
    """Masks of a dataset plus the thresholds and histogram behind them."""
    masks: List[Mask]
    thresholds: Dict[str, int]
    histogram: Histogram256
    peaks: Optional[PeakList] = None
    candidates: Dict[str, List[Mask]] = field(default_factory=dict)


def segment_dataset(reconstructions, rule, config=None, rois=None,
                    per_subject=False, candidates=False):
    """Thresholds every reconstruction of a dataset.

    Parameters
    ----------
    reconstructions : list of Slice
    rule : ThresholdRule
    config : HistogramConfig, optional
    rois : dict, optional
      maps (subject_id, index) to Mask
    per_subject : bool
      one threshold per subject from its own histogram instead of one for
      the whole dataset
    candidates : bool
      also build the leftmost- and rightmost-peak masks for inspection

    Returns
    -------
    result : SegmentationResult
    """
    config = config or HistogramConfig()
    reconstructions = list(reconstructions)
    if not reconstructions:
        raise InvalidArgumentError('nothing to segment')
    if rule.roi_required and rois is None:
        raise MissingROIError(f'{rule.polarity} rule requires ROI masks')

    def roi_of(image):
        if rois is None:
            return None
        try:
            return rois[image.key]
        except KeyError:
            raise MissingROIError(f'no ROI for {image.subject_id}:'
                                  f'{image.index}')

    def pooled(images):
        roi_list = [roi_of(s) for s in images] if rois is not None else None
        return compute_histogram(images, roi_list)

    histogram = pooled(reconstructions)
    groups = {'*': reconstructions}
    if per_subject:
        groups = {}
        for image in reconstructions:
            groups.setdefault(image.subject_id, []).append(image)

    thresholds = {}
    peaks = None
    for name, images in groups.items():
        hist = histogram if name == '*' else pooled(images)
        thresholds[name], found = resolve_threshold(hist, rule, config)
        if name == '*':
            peaks = found
        logger.info('threshold for %s: %d', 'dataset' if name == '*'
                    else f'subject {name}', thresholds[name])

    masks = []
    for image in reconstructions:
        t = thresholds['*'] if '*' in thresholds else \
            thresholds[image.subject_id]
        masks.append(apply_threshold(image, t, rule, roi_of(image)))

    result = SegmentationResult(masks, thresholds, histogram, peaks)
    if candidates:
        result.candidates = candidate_masks(reconstructions, histogram,
                                            config, rois)
    return result


def candidate_masks(reconstructions, histogram, config, rois=None):
    """Masks at the leftmost and rightmost peak, for inspecting cases where
    the anomaly lands in the unexpected cluster."""
    peaks = detect_peaks(histogram, config.smooth_window,
                         config.min_prominence_fraction,
                         config.min_separation)
    if len(peaks) == 0:
        return {}
    out = {}
    for name, rule in (('rightmost', BrightRule(roi_required=False)),
                       ('leftmost', DarkRule(roi_required=False))):
        t = rule.working_threshold(rule.pick_peak(peaks))
        masks = []
        for image in reconstructions:
            roi = rois.get(image.key) if rois is not None else None
            mask = apply_threshold(image, t, rule, roi)
            if roi is not None:
                mask = Mask(mask.pixels & roi.pixels, mask.subject_id,
                            mask.index)
            masks.append(mask)
        out[name] = masks
    return out
