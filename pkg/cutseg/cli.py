"""
cutseg.
Unsupervised anomaly segmentation with adversarial selective cuts.

Generates synthetic phantom data, trains the dual-decoder network against a
reference set of normal slices, thresholds its reconstructions into anomaly
masks and scores masks against ground truth.

Usage:
    cutseg phantom-gen --out <dir> [--n <n>] [--seed <seed>] [--size <px>]
                       [--noise <std>] [--polarity <p>] [-v]
    cutseg train --config <file> [--name <name>] [--seed <seed>]
                 [--out <dir>] [--schedule <s>] [--batch-size <b>]
                 [--early-stop] [-v]
    cutseg segment <checkpoint> <manifest>... --out <dir> [--config <file>]
                   [--threshold <t>] [--polarity <p>] [--roi <file>]...
                   [--per-subject] [--postproc <m>] [--se-size <k>]
                   [--gate-threshold <t>] [--candidates] [--panels] [-v]
    cutseg eval <pred_dir> <gt_manifest>... --out <dir> [--level <level>]
                [--config <file>] [-v]
    cutseg hist <checkpoint> <manifest>... --out <dir> [--config <file>] [-v]
    cutseg (-h | --help)
    cutseg --version

Options:
    -h --help             Show this screen
    --version             Show version
    -v --verbose          Log debug messages
    --out <dir>           Output directory (for train: parent of the run
                          directory)
    --n <n>               Phantoms per class [default: 50]
    --seed <seed>         Random seed (phantom-gen default: 0)
    --size <px>           Phantom image size, a multiple of 16 [default: 64]
    --noise <std>         Phantom noise standard deviation [default: 0.05]
    --polarity <p>        Anomaly polarity, bright or dark
    --config <file>       Run configuration (JSON)
    --name <name>         Run name; the run directory is <out>/<name>
    --schedule <s>        Cycle schedule: brats, msseg, lits, flair or t2
    --batch-size <b>      Training mini-batch size
    --early-stop          Stop once the reconstruction histogram shows
                          separated peaks
    --threshold <t>       Fixed threshold (0-255), skips peak detection
    --roi <file>          Manifest whose masks are regions of interest
    --per-subject         One threshold per subject instead of per dataset
    --postproc <m>        Post-processing: none, opening or gate
    --se-size <k>         Opening structuring element size
    --gate-threshold <t>  Modality gate intensity (0-255)
    --candidates          Also write leftmost- and rightmost-peak masks
    --panels              Render input / cut / reconstruction panels
    --level <level>       subject-wise or slice-wise [default: subject-wise]

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
numerical error, 4 I/O error.
"""
import json
import logging
import os
import sys

from docopt import DocoptExit, docopt

from cutseg import __version__
from cutseg.config import load_config
from cutseg.data.images import ReferenceSet
from cutseg.data.manifests import read_mask_dir, write_mask_dir
from cutseg.data.phantoms import PhantomSpec, write_phantom_corpus
from cutseg.data.preprocessing import (balance_sets, load_dataset,
                                       load_dataset_masks)
from cutseg.errors import (ConfigError, CutSegError, InvalidArgumentError)
from cutseg.evaluation import LEVELS, score_masks, write_results
from cutseg.network.checkpoint import load_checkpoint
from cutseg.network.models import infer, init_model
from cutseg.plots import plot_cut_panels, plot_histogram
from cutseg.thresholding import (compute_histogram, detect_peaks,
                                 segment_dataset)
from cutseg.training import run_training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _number(args, key, cast=int):
    value = args[key]
    if value is None:
        return None
    try:
        return cast(value)
    except ValueError:
        raise InvalidArgumentError(f'{key} expects a number, got {value!r}')


def cmd_phantom_gen(args):
    n = _number(args, '--n')
    if n < 1:
        raise InvalidArgumentError(f'--n must be >= 1, got {n}')
    spec = PhantomSpec(image_size=_number(args, '--size'),
                       noise_std=_number(args, '--noise', float),
                       anomaly_polarity=args['--polarity'] or 'bright')
    violations = spec.validate()
    if violations:
        raise ConfigError(violations)
    seed = _number(args, '--seed') or 0
    normal, anomalous = write_phantom_corpus(args['--out'], spec, n, seed)
    print(normal)
    print(anomalous)


def cmd_train(args):
    overrides = {
        'name': args['--name'],
        'seed': _number(args, '--seed'),
        'output_dir': args['--out'],
        'training.schedule': args['--schedule'],
        'training.batch_size': _number(args, '--batch-size'),
        'training.early_stop_on_peaks': True if args['--early-stop']
        else None,
    }
    config = load_config(args['--config'], overrides)
    if args['--schedule']:
        # a schedule flag wins over explicit counts in the file
        config.training.stage1_cycles = None
        config.training.stage2_cycles = None
    config.check()
    run_dir = config.run_dir
    os.makedirs(run_dir, exist_ok=True)
    config.write_echo(os.path.join(run_dir, 'config.json'))

    inputs = load_dataset(config.inputs, config.preprocess)
    reference = ReferenceSet(load_dataset(config.reference,
                                          config.preprocess))
    inputs, reference = balance_sets(inputs, reference, config.seed)
    state = init_model(config.network, config.seed)
    state, history = run_training(state, inputs, reference, config.training,
                                  config.histogram, run_dir)
    print(run_dir)
    logger.info('training finished after %d cycles (%d epochs)',
                len(history.cycles), len(history))


def _segment_config(args):
    overrides = {
        'threshold.polarity': args['--polarity'],
        'threshold.threshold_override': _number(args, '--threshold'),
        'per_subject_threshold': True if args['--per-subject'] else None,
        'postproc.method': args['--postproc'],
        'postproc.se_size': _number(args, '--se-size'),
        'postproc.gate_threshold': _number(args, '--gate-threshold'),
        'rois': args['--roi'] or None,
    }
    config = load_config(args['--config'], overrides)
    return config.check(need_data=False)


def _reconstruct(args, config):
    checkpoint = load_checkpoint(args['<checkpoint>'])
    slices = load_dataset(args['<manifest>'], config.preprocess)
    outputs = infer(checkpoint.state, slices, config.training.batch_size)
    return slices, outputs


def cmd_segment(args):
    config = _segment_config(args)
    rule = config.rule()
    slices, outputs = _reconstruct(args, config)
    rois = (load_dataset_masks(config.rois, config.preprocess)
            if config.rois else None)
    result = segment_dataset(outputs.reconstruction_slices(), rule,
                             config.histogram, rois,
                             config.per_subject_threshold,
                             candidates=args['--candidates'])
    out = args['--out']
    os.makedirs(out, exist_ok=True)
    result.histogram.to_csv(os.path.join(out, 'histogram.csv'))
    threshold = result.thresholds.get('*')
    if threshold is not None and rule.polarity == 'dark':
        # drawn on the original intensity scale
        threshold = 255 - threshold
    plot_histogram(result.histogram, os.path.join(out, 'histogram.png'),
                   result.peaks, threshold, title=f'{rule.polarity} rule')
    with open(os.path.join(out, 'thresholds.json'), 'w') as f:
        json.dump({'polarity': rule.polarity,
                   'thresholds': result.thresholds}, f, indent=2,
                  sort_keys=True)
        f.write('\n')
    write_mask_dir(result.masks, os.path.join(out, 'masks'))

    mask_filter = config.postproc.build()
    if config.postproc.method != 'none':
        gates = slices
        if config.postproc.gate_manifest:
            by_key = {s.key: s for s in load_dataset(
                [config.postproc.gate_manifest], config.preprocess)}
            gates = [by_key.get(m.key) for m in result.masks]
        filtered = mask_filter.apply_all(result.masks, gates)
        write_mask_dir(filtered, os.path.join(out, 'masks_post'))
    for name, masks in result.candidates.items():
        write_mask_dir(masks, os.path.join(out, 'candidates', name))
    if args['--panels']:
        plot_cut_panels(slices, outputs, os.path.join(out, 'panels.png'))
    for name, t in sorted(result.thresholds.items()):
        print(f'threshold {"dataset" if name == "*" else name}: {t}')


def cmd_eval(args):
    level = args['--level']
    if level not in LEVELS:
        raise InvalidArgumentError(f'--level must be one of {LEVELS}, got '
                                   f'{level!r}')
    config = load_config(args['--config']).check(need_data=False)
    predictions = read_mask_dir(args['<pred_dir>'])
    if not predictions:
        raise InvalidArgumentError(f'no masks found under '
                                   f'{args["<pred_dir>"]}')
    truth = load_dataset_masks(args['<gt_manifest>'], config.preprocess)
    predicted = {m.key for m in predictions}
    # slices dropped by the empty-slice filter have no prediction
    skipped = [k for k, m in truth.items() if k not in predicted and
               m.area == 0]
    for key in skipped:
        del truth[key]
    if skipped:
        logger.debug('ignoring %d empty ground-truth masks without a '
                     'prediction', len(skipped))
    table = score_masks(predictions, truth.values(), level)
    summary = write_results(table, args['--out'], level)
    print(f'{summary["mean"]:.4f}±{summary["std"]:.4f}')


def cmd_hist(args):
    config = load_config(args['--config']).check(need_data=False)
    _, outputs = _reconstruct(args, config)
    histogram = compute_histogram(outputs.reconstruction_slices())
    peaks = detect_peaks(histogram, config.histogram.smooth_window,
                         config.histogram.min_prominence_fraction,
                         config.histogram.min_separation)
    out = args['--out']
    os.makedirs(out, exist_ok=True)
    histogram.to_csv(os.path.join(out, 'histogram.csv'))
    plot_histogram(histogram, os.path.join(out, 'histogram.png'), peaks)
    with open(os.path.join(out, 'peaks.json'), 'w') as f:
        json.dump([p._asdict() for p in peaks], f, indent=2)
        f.write('\n')
    print('peaks at bins: ' + ', '.join(str(b) for b in peaks.bins))


COMMANDS = {
    'phantom-gen': cmd_phantom_gen,
    'train': cmd_train,
    'segment': cmd_segment,
    'eval': cmd_eval,
    'hist': cmd_hist,
}


def run_command(name, args):
    """Runs one command and maps its failure to an exit code."""
    try:
        COMMANDS[name](args)
    except (ConfigError, InvalidArgumentError) as exc:
        logger.error('%s', exc)
        return EXIT_USAGE
    except CutSegError as exc:
        logger.error('%s', exc)
        return EXIT_RUNTIME
    except OSError as exc:
        logger.error('%s', exc)
        return EXIT_IO
    return EXIT_OK


def main(argv=None):
    try:
        args = docopt(__doc__, argv=argv, version=f'cutseg {__version__}')
    except DocoptExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args['--verbose'] else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr)
    for name in COMMANDS:
        if args[name]:
            return run_command(name, args)
    return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
