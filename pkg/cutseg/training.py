"""
Two-stage cycle training.

A cycle is one discriminator phase followed by one main-module phase:

* D-phase: the fence cuts of the inputs (labelled -1) and the reference
  slices (labelled +1) are shuffled together and the discriminator is fit
  to them; the main module is not touched.
* M-phase: the main module minimizes the weighted sum of the fence,
  disjoincy and reconstruction losses, with gradients flowing through the
  frozen discriminator into the fence decoder.

Stage 1 runs `stage1_cycles` cycles against the reference set. At the
stage boundary the reference set is augmented with its own fence cuts, and
stage 2 runs `stage2_cycles` cycles against the augmented set.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from cutseg.data.images import ReferenceSet, Slice
from cutseg.errors import ConfigError, InvalidArgumentError, NumericalFailure
from cutseg.losses import (LossReport, loss_disjoincy, loss_fence,
                           loss_reconstruction, mae_to_targets, soft_overlap)
from cutseg.network.checkpoint import save_checkpoint
from cutseg.network.models import (as_batch, backward, forward_discriminator,
                                   forward_main, frozen, infer)
from cutseg.thresholding import (HistogramConfig, compute_histogram,
                                 detect_peaks)

logger = logging.getLogger(__name__)

# (stage 1 cycles, stage 2 cycles) used for each experiment
SCHEDULES = {
    'brats': (2, 1),
    'msseg': (3, 1),
    'lits': (2, 2),
    'flair': (2, 4),
    't2': (2, 2),
}

PHASES = ('D', 'M')


@dataclass
class TrainConfig:
    """Training schedule and optimizer settings.

    Parameters
    ----------
    stage1_cycles, stage2_cycles : int, optional
      explicit cycle counts; override `schedule`
    schedule : str, optional
      one of SCHEDULES; when neither counts nor schedule are set the
      'brats' schedule is used
    epochs_per_D_step, epochs_per_M_step : int
    batch_size : int
    learning_rate : float
    loss_weights : (float, float, float)
      weights of the fence, disjoincy and reconstruction losses
    seed : int
    early_stop_on_peaks : bool
      stop at the first cycle boundary whose histogram shows enough
      separated peaks
    refresh_augmentation : bool
      recompute the fence cuts of the reference set every stage-2 cycle
    betas : (float, float)
    adam_eps : float
    """
    stage1_cycles: Optional[int] = None
    stage2_cycles: Optional[int] = None
    schedule: Optional[str] = None
    epochs_per_D_step: int = 1
    epochs_per_M_step: int = 1
    batch_size: int = 8
    learning_rate: float = 5e-5
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    early_stop_on_peaks: bool = False
    refresh_augmentation: bool = False
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    @property
    def cycles(self):
        """(stage 1, stage 2) cycle counts after applying the schedule."""
        default = SCHEDULES.get(self.schedule or 'brats', SCHEDULES['brats'])
        s1 = default[0] if self.stage1_cycles is None else self.stage1_cycles
        s2 = default[1] if self.stage2_cycles is None else self.stage2_cycles
        return s1, s2

    def validate(self):
        violations = []
        if self.schedule is not None and self.schedule not in SCHEDULES:
            violations.append(f'training.schedule must be one of '
                              f'{sorted(SCHEDULES)}, got {self.schedule!r}')
        for name in ('stage1_cycles', 'stage2_cycles'):
            value = getattr(self, name)
            if value is not None and value < 0:
                violations.append(f'training.{name} must be >= 0, got '
                                  f'{value}')
        for name in ('epochs_per_D_step', 'epochs_per_M_step', 'batch_size'):
            if getattr(self, name) < 1:
                violations.append(f'training.{name} must be >= 1, got '
                                  f'{getattr(self, name)}')
        if not self.learning_rate >= 0:
            violations.append('training.learning_rate must be >= 0, got '
                              f'{self.learning_rate}')
        if len(self.loss_weights) != 3 or any(w < 0
                                              for w in self.loss_weights):
            violations.append('training.loss_weights must be three '
                              'non-negative numbers')
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            violations.append('training.betas must be two numbers in [0, 1)')
        if self.adam_eps <= 0:
            violations.append('training.adam_eps must be positive')
        return violations


@dataclass
class CyclePosition:
    stage: int
    cycle_index: int
    phase: str

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise InvalidArgumentError(f'stage must be 1 or 2, got '
                                       f'{self.stage}')
        if self.phase not in PHASES:
            raise InvalidArgumentError(f'phase must be D or M, got '
                                       f'{self.phase!r}')

    def to_dict(self):
        return asdict(self)


@dataclass
class HistoryEntry:
    """Loss report of one optimization epoch and where it happened."""
    position: CyclePosition
    epoch: int
    cycle: int
    report: LossReport

    def to_dict(self):
        record = self.report.to_dict()
        record.update(self.position.to_dict())
        record.update(epoch=self.epoch, cycle=self.cycle)
        return record


@dataclass
class CycleSummary:
    cycle: int
    stage: int
    n_peaks: int
    soft_overlap: float
    separated: bool
    checkpoint: Optional[str] = None


@dataclass
class TrainingHistory:
    epochs: List[HistoryEntry] = field(default_factory=list)
    cycles: List[CycleSummary] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)

    def __iter__(self):
        return iter(self.epochs)

    def reports(self, phase=None):
        return [e.report for e in self.epochs
                if phase is None or e.position.phase == phase]


class Optimizers(object):
    """One Adam optimizer for the main module and one for the
    discriminator. Their moments persist across phases and stages."""

    def __init__(self, state, config):
        kwargs = dict(lr=config.learning_rate, betas=tuple(config.betas),
                      eps=config.adam_eps)
        self.main = torch.optim.Adam(state.main.parameters(), **kwargs)
        self.disc = torch.optim.Adam(state.disc.parameters(), **kwargs)

    def state_dict(self):
        return {'main': self.main.state_dict(),
                'disc': self.disc.state_dict()}

    def load_state_dict(self, state_dict):
        self.main.load_state_dict(state_dict['main'])
        self.disc.load_state_dict(state_dict['disc'])


def make_optimizers(state, config):
    return Optimizers(state, config)


def epoch_seed(seed, stage, cycle, phase, epoch):
    """Seed of one epoch, derived from the run seed and the position."""
    entropy = [int(seed), int(stage), int(cycle), PHASES.index(phase),
               int(epoch)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _apply(state, grads, optimizer):
    params = dict(state.named_parameters())
    optimizer.zero_grad(set_to_none=True)
    for name, g in grads.items():
        params[name].grad = g
    optimizer.step()
    state.step_counter += 1


def _batches(n, batch_size, seed):
    order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_discriminator_step(state, fakes, reals, opt, seed, config=None,
                             position=None):
    """One epoch of discriminator training.

    Parameters
    ----------
    state : ModelState
    fakes : list of Slice
      fence cuts of the inputs, target -1
    reals : list of Slice
      reference slices, target +1
    opt : Optimizers
    seed : int
      shuffling and dropout randomness
    config : TrainConfig, optional
    position : CyclePosition, optional
      attached to numerical-failure diagnostics

    Returns
    -------
    state : ModelState
    report : LossReport
    """
    config = config or TrainConfig()
    fakes, reals = list(fakes), list(reals)
    if not fakes or not reals:
        raise InvalidArgumentError('discriminator training needs fake and '
                                   'reference slices')
    items = fakes + reals
    targets = np.r_[-np.ones(len(fakes)), np.ones(len(reals))]
    generator = torch.Generator().manual_seed(seed)
    total = 0.0
    for b, idx in enumerate(_batches(len(items), config.batch_size, seed)):
        batch = [items[i] for i in idx]
        scores = forward_discriminator(state, batch, training=True,
                                       seed=generator)
        loss = mae_to_targets(scores, torch.as_tensor(targets[idx],
                                                      dtype=scores.dtype))
        try:
            grads = backward(state, loss, frozen_parts={'main'})
        except NumericalFailure as e:
            e.position = _where(position, b)
            raise
        _apply(state, grads, opt.disc)
        total += loss.item() * len(idx)
    report = LossReport(loss_discriminator=total / len(items),
                        n=len(fakes), m=len(reals))
    return state, report


def train_main_step(state, inputs, opt, seed, config=None, position=None):
    """One epoch of main-module training against the frozen discriminator.

    Parameters
    ----------
    state : ModelState
    inputs : list of Slice
    opt : Optimizers
    seed : int
    config : TrainConfig, optional
    position : CyclePosition, optional

    Returns
    -------
    state : ModelState
    report : LossReport
      epoch means of the three main-module losses
    """
    config = config or TrainConfig()
    inputs = list(inputs)
    if not inputs:
        raise InvalidArgumentError('main-module training needs inputs')
    w_fence, w_disjoincy, w_recon = config.loss_weights
    generator = torch.Generator().manual_seed(seed)
    sums = np.zeros(3)
    for b, idx in enumerate(_batches(len(inputs), config.batch_size, seed)):
        batch = [inputs[i] for i in idx]
        x, _ = as_batch(batch, state.config)
        out = forward_main(state, x, training=True, seed=generator)
        with frozen(state.disc):
            scores = forward_discriminator(state, out.fence)
        parts = (loss_fence(scores),
                 loss_disjoincy(out.fence, out.wild),
                 loss_reconstruction(x, out.reconstruction))
        loss = (w_fence * parts[0] + w_disjoincy * parts[1] +
                w_recon * parts[2])
        try:
            grads = backward(state, loss, frozen_parts={'disc'})
        except NumericalFailure as e:
            e.position = _where(position, b)
            raise
        _apply(state, grads, opt.main)
        sums += [p.item() * len(idx) for p in parts]
    means = sums / len(inputs)
    report = LossReport(loss_fence=float(means[0]),
                        loss_disjoincy=float(means[1]),
                        loss_reconstruction=float(means[2]),
                        n=len(inputs), m=0)
    return state, report


def _where(position, batch_index):
    where = position.to_dict() if position is not None else {}
    where['batch'] = batch_index
    return where


def augment_reference(state, reference, batch_size=None):
    """Appends the fence cut of every reference slice to the reference set.

    Returns
    -------
    augmented : ReferenceSet
      the original members followed by their fence cuts, 2 * len(reference)
      slices
    """
    originals = list(reference)
    fence = infer(state, originals, batch_size).fence.detach().numpy()
    generated = [Slice(fence[i, 0], f'{s.subject_id}:fence', s.index)
                 for i, s in enumerate(originals)]
    return ReferenceSet(tuple(originals + generated))


def peaks_separated(histogram, hist_config=None):
    """True when the histogram has at least `min_peaks` peaks that are
    pairwise `min_separation` bins apart."""
    hist_config = hist_config or HistogramConfig()
    if histogram.total == 0:
        return False
    peaks = detect_peaks(histogram, hist_config.smooth_window,
                         hist_config.min_prominence_fraction,
                         hist_config.min_separation)
    return len(peaks) >= hist_config.min_peaks


def _evaluate(state, inputs, hist_config, batch_size=None):
    subset = list(inputs)[:hist_config.eval_subset_size]
    out = infer(state, subset, batch_size)
    histogram = compute_histogram(out.reconstruction_slices())
    return histogram, out


def check_termination(state, inputs, hist_config=None):
    """Histogram-based stopping test.

    Runs the network on the first `eval_subset_size` inputs and pools the
    histogram of their reconstructions.

    Returns
    -------
    done : bool
    histogram : Histogram256
    """
    hist_config = hist_config or HistogramConfig()
    histogram, _ = _evaluate(state, inputs, hist_config)
    return peaks_separated(histogram, hist_config), histogram


class RunLog(object):
    """Files of a run directory: checkpoints, loss records, histograms."""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        if run_dir is not None:
            os.makedirs(run_dir, exist_ok=True)
            # start a fresh record file
            open(self.losses_path, 'w').close()

    @property
    def losses_path(self):
        return os.path.join(self.run_dir, 'losses.jsonl')

    def checkpoint_path(self, k):
        return os.path.join(self.run_dir, f'ckpt_cycle{k}.bin')

    def record(self, entry):
        if self.run_dir is None:
            return
        with open(self.losses_path, 'a') as f:
            f.write(json.dumps(entry.to_dict(), sort_keys=True) + '\n')

    def checkpoint(self, k, state, optimizers, position):
        if self.run_dir is None:
            return None
        path = self.checkpoint_path(k)
        save_checkpoint(path, state, optimizers, position)
        return path

    def histogram(self, k, histogram):
        if self.run_dir is not None:
            histogram.to_csv(os.path.join(self.run_dir,
                                          f'histogram_cycle{k}.csv'))


def run_training(state, inputs, reference, config, hist_config=None,
                 run_dir=None, optimizers=None):
    """Runs the full two-stage schedule.

    Parameters
    ----------
    state : ModelState
    inputs : list of Slice
    reference : ReferenceSet
    config : TrainConfig
    hist_config : HistogramConfig, optional
    run_dir : str, optional
      when given, receives ckpt_cycle<k>.bin (k = 0 for the initial model),
      losses.jsonl and histogram_cycle<k>.csv
    optimizers : Optimizers, optional
      continue with existing optimizer moments

    Returns
    -------
    state : ModelState
    history : TrainingHistory
    """
    violations = config.validate()
    if violations:
        raise ConfigError(violations)
    hist_config = hist_config or HistogramConfig()
    inputs = list(inputs)
    if not inputs or len(reference) == 0:
        raise InvalidArgumentError('training needs inputs and a reference '
                                   'set')
    opt = optimizers or make_optimizers(state, config)
    log = RunLog(run_dir)
    history = TrainingHistory()
    log.checkpoint(0, state, opt, None)

    stage1, stage2 = config.cycles
    schedule = [(1, c) for c in range(stage1)] + \
        [(2, c) for c in range(stage2)]
    reals = list(reference)
    for k, (stage, cycle) in enumerate(schedule, 1):
        if stage == 2 and (cycle == 0 or config.refresh_augmentation):
            reals = list(augment_reference(state, reference))
            logger.info('reference set augmented to %d slices', len(reals))

        fakes = infer(state, inputs, config.batch_size).fence_slices()
        for epoch in range(config.epochs_per_D_step):
            position = CyclePosition(stage, cycle, 'D')
            seed = epoch_seed(config.seed, stage, cycle, 'D', epoch)
            state, report = train_discriminator_step(
                state, fakes, reals, opt, seed, config, position)
            _log_epoch(history, log, position, epoch, k, report)

        for epoch in range(config.epochs_per_M_step):
            position = CyclePosition(stage, cycle, 'M')
            seed = epoch_seed(config.seed, stage, cycle, 'M', epoch)
            state, report = train_main_step(state, inputs, opt, seed, config,
                                            position)
            _log_epoch(history, log, position, epoch, k, report)

        histogram, out = _evaluate(state, inputs, hist_config,
                                   config.batch_size)
        separated = peaks_separated(histogram, hist_config)
        n_peaks = len(detect_peaks(histogram, hist_config.smooth_window,
                                   hist_config.min_prominence_fraction,
                                   hist_config.min_separation)) \
            if histogram.total else 0
        overlap = float(soft_overlap(out.fence, out.wild))
        log.histogram(k, histogram)
        path = log.checkpoint(k, state, opt, {'stage': stage,
                                              'cycle_index': cycle,
                                              'phase': 'M', 'cycle': k})
        history.cycles.append(CycleSummary(k, stage, n_peaks, overlap,
                                           separated, path))
        logger.info('cycle %d (stage %d) done: %d peaks, soft overlap %.4f'
                    '%s', k, stage, n_peaks, overlap,
                    f', saved {path}' if path else '')
        if config.early_stop_on_peaks and separated:
            logger.info('histogram peaks separated; stopping after cycle %d',
                        k)
            history.stopped_early = True
            break
    return state, history


def _log_epoch(history, log, position, epoch, k, report):
    entry = HistoryEntry(position, epoch, k, report)
    history.epochs.append(entry)
    log.record(entry)
    if position.phase == 'D':
        logger.info('stage %d cycle %d D epoch %d: loss_D %.5f',
                    position.stage, position.cycle_index, epoch,
                    report.loss_discriminator)
    else:
        logger.info('stage %d cycle %d M epoch %d: fence %.5f disjoincy '
                    '%.5f recon %.5f', position.stage, position.cycle_index,
                    epoch, report.loss_fence, report.loss_disjoincy,
                    report.loss_reconstruction)
