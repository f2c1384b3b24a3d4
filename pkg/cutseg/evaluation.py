"""
Dice scoring of predicted masks against ground truth.

Scores are kept per slice together with the raw overlap counts, so the
subject-wise Dice can pool a subject's pixels over all of its slices
instead of averaging slice scores.
"""
import json
import logging
import os

import numpy as np
import pandas as pd

from cutseg.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SUBJECT_WISE = 'subject-wise'
SLICE_WISE = 'slice-wise'
LEVELS = (SUBJECT_WISE, SLICE_WISE)


def _dice(intersection, n_pred, n_gt):
    denom = n_pred + n_gt
    if denom == 0:
        return 1.0
    return 2.0 * intersection / denom


def dice_score(pred, gt):
    """Dice overlap 2|A & B| / (|A| + |B|); two empty masks score 1.0.

    Parameters
    ----------
    pred, gt : Mask

    Returns
    -------
    dice : float
    """
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f'mask shapes differ: {pred.shape} vs '
                                   f'{gt.shape}')
    intersection = int(np.logical_and(pred.pixels, gt.pixels).sum())
    return _dice(intersection, pred.area, gt.area)


class ScoreTable(object):
    """Per-slice Dice scores with the counts behind them.

    Parameters
    ----------
    frame : pandas.DataFrame, optional
      columns subject_id, slice_index, dice, intersection, n_pred, n_gt
    level : str
      default aggregation level
    """
    COLUMNS = ['subject_id', 'slice_index', 'dice', 'intersection', 'n_pred',
               'n_gt']

    def __init__(self, frame=None, level=SLICE_WISE):
        if level not in LEVELS:
            raise InvalidArgumentError(f'level must be one of {LEVELS}, got '
                                       f'{level!r}')
        self.frame = (frame[self.COLUMNS].reset_index(drop=True)
                      if frame is not None
                      else pd.DataFrame(columns=self.COLUMNS))
        self.level = level

    def __len__(self):
        return len(self.frame)

    @classmethod
    def from_rows(cls, rows, level=SLICE_WISE):
        return cls(pd.DataFrame(list(rows), columns=cls.COLUMNS), level)

    def slice_scores(self):
        return self.frame['dice'].astype(float).to_numpy()

    def subject_scores(self):
        """One pooled Dice per subject.

        Returns
        -------
        scores : pandas.DataFrame
          columns subject_id, n_slices, dice; sorted by subject_id
        """
        grouped = self.frame.groupby('subject_id', sort=True).agg(
            n_slices=('slice_index', 'size'),
            intersection=('intersection', 'sum'),
            n_pred=('n_pred', 'sum'),
            n_gt=('n_gt', 'sum')).reset_index()
        grouped['dice'] = [_dice(int(i), int(p), int(g)) for i, p, g in zip(
            grouped['intersection'], grouped['n_pred'], grouped['n_gt'])]
        return grouped[['subject_id', 'n_slices', 'dice']]


def score_masks(predictions, ground_truth, level=SLICE_WISE):
    """Pairs predictions with ground truth by (subject_id, slice index) and
    scores each pair.

    Parameters
    ----------
    predictions, ground_truth : iterable of Mask
    level : str

    Returns
    -------
    table : ScoreTable
      rows ordered by subject_id then slice index
    """
    preds = {m.key: m for m in predictions}
    truth = {m.key: m for m in ground_truth}
    unmatched = sorted(set(preds) ^ set(truth))
    if unmatched:
        shown = ', '.join(f'{s}:{i}' for s, i in unmatched[:20])
        more = f' (+{len(unmatched) - 20} more)' if len(unmatched) > 20 \
            else ''
        raise InvalidArgumentError(f'{len(unmatched)} unmatched slice ids: '
                                   f'{shown}{more}')
    if not preds:
        raise InvalidArgumentError('no predictions to score')
    rows = []
    for key in sorted(preds):
        pred, gt = preds[key], truth[key]
        if pred.shape != gt.shape:
            raise InvalidArgumentError(
                f'{key[0]}:{key[1]}: prediction shape {pred.shape} does not '
                f'match ground truth shape {gt.shape}')
        intersection = int(np.logical_and(pred.pixels, gt.pixels).sum())
        rows.append((key[0], key[1],
                     _dice(intersection, pred.area, gt.area),
                     intersection, pred.area, gt.area))
    return ScoreTable.from_rows(rows, level)


def aggregate(scores, level=None):
    """Mean and population standard deviation of the Dice scores.

    Parameters
    ----------
    scores : ScoreTable
    level : str, optional
      'subject-wise' pools pixels per subject first; 'slice-wise' uses the
      per-slice scores; defaults to the table's level

    Returns
    -------
    mean, std : float
    """
    level = level or scores.level
    if level not in LEVELS:
        raise InvalidArgumentError(f'level must be one of {LEVELS}, got '
                                   f'{level!r}')
    if len(scores) == 0:
        raise InvalidArgumentError('cannot aggregate an empty score table')
    if level == SUBJECT_WISE:
        values = scores.subject_scores()['dice'].to_numpy(dtype=float)
    else:
        values = scores.slice_scores()
    if np.all(values == values[0]):
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values))


def write_results(table, out_dir, level=None):
    """Writes scores.csv and summary.json to `out_dir`.

    scores.csv has one row per subject (subject_id, n_slices, dice) for
    subject-wise results and one row per slice (subject_id, slice_index,
    dice) for slice-wise results. summary.json holds level, mean, std and
    n, the number of scored units.

    Returns
    -------
    summary : dict
    """
    level = level or table.level
    mean, std = aggregate(table, level)
    if level == SUBJECT_WISE:
        rows = table.subject_scores()
    else:
        rows = table.frame[['subject_id', 'slice_index', 'dice']]
    os.makedirs(out_dir, exist_ok=True)
    rows.to_csv(os.path.join(out_dir, 'scores.csv'), index=False,
                lineterminator='\n')
    summary = {'level': level, 'mean': mean, 'std': std, 'n': len(rows)}
    with open(os.path.join(out_dir, 'summary.json'), 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('%s Dice %.4f +/- %.4f over %d', level, mean, std,
                len(rows))
    return summary
