"""
phantom_experiment.
End-to-end synthetic experiment. Trains the network on bright-disk phantoms
with the two-plus-one cycle schedule, segments a held-out anomalous set at
the rightmost histogram peak, cleans the masks with a 5x5 opening and
checks the Dice, disjoincy and histogram targets. With --repeat the whole
run is done twice and the checkpoints, histograms and masks of both runs
are compared byte for byte.

Usage:
    phantom_experiment.py --out <dir> [--n <n>] [--seed <seed>] [--repeat]
                          [-v]
    phantom_experiment.py (-h | --help)

Options:
    -h --help      Show this screen
    -v --verbose   Log debug messages
    --out <dir>    Working directory
    --n <n>        Phantoms per class [default: 200]
    --seed <seed>  Random seed [default: 0]
    --repeat       Run twice and compare the output bytes
"""
import json
import logging
import os
import sys

from docopt import docopt

from cutseg.data.images import ReferenceSet
from cutseg.data.manifests import write_mask_dir
from cutseg.data.phantoms import PhantomSpec, write_phantom_corpus
from cutseg.data.preprocessing import (PreprocessConfig, balance_sets,
                                       load_dataset, load_dataset_masks)
from cutseg.evaluation import SLICE_WISE, aggregate, score_masks
from cutseg.losses import soft_overlap
from cutseg.network.models import NetworkConfig, infer, init_model
from cutseg.postprocessing import Opening
from cutseg.thresholding import BrightRule, HistogramConfig, segment_dataset
from cutseg.training import TrainConfig, run_training

logger = logging.getLogger('phantom_experiment')

MIN_DICE = 0.50
MAX_POSTPROC_DROP = 0.02
MAX_SOFT_OVERLAP = 0.05
MIN_PEAKS = 3
SE_SIZE = 5

# per-cycle epochs and optimizer settings of the synthetic run
D_EPOCHS = 1
M_EPOCHS = 6
LEARNING_RATE = 2e-4
BATCH_SIZE = 8
BN_MOMENTUM = 0.9

COMPARED_PREFIXES = ('ckpt_cycle', 'histogram')
COMPARED_DIRS = ('masks', 'masks_post')


def experiment_configs(seed):
    """Network, training and histogram settings of the synthetic run.

    The 2+1 cycle schedule is kept. Each cycle fits the discriminator for
    one epoch and the main module for several. The batch-norm running
    statistics follow the batches closely enough to settle within a phase.

    Returns
    -------
    network : NetworkConfig
    training : TrainConfig
    histogram : HistogramConfig
    """
    network = NetworkConfig(input_size=(64, 64), bn_momentum=BN_MOMENTUM)
    training = TrainConfig(schedule='brats', seed=seed,
                           epochs_per_D_step=D_EPOCHS,
                           epochs_per_M_step=M_EPOCHS,
                           learning_rate=LEARNING_RATE,
                           batch_size=BATCH_SIZE)
    return network, training, HistogramConfig()


def run_experiment(out_dir, n, seed):
    """Runs one full experiment in `out_dir` and returns its report."""
    spec = PhantomSpec(image_size=64, noise_std=0.05,
                       anomaly_polarity='bright')
    normal, anomalous = write_phantom_corpus(os.path.join(out_dir, 'train'),
                                             spec, n, seed)
    _, heldout = write_phantom_corpus(os.path.join(out_dir, 'heldout'),
                                      spec, n, seed + 1)

    # phantoms are already on the [0, 1] scale
    preprocess = PreprocessConfig(normalize=False)
    inputs = load_dataset([anomalous], preprocess)
    reference = ReferenceSet(load_dataset([normal], preprocess))
    inputs, reference = balance_sets(inputs, reference, seed)

    net_config, train_config, hist_config = experiment_configs(seed)
    run_dir = os.path.join(out_dir, 'run')
    state = init_model(net_config, seed)
    state, history = run_training(state, inputs, reference, train_config,
                                  hist_config, run_dir)

    test = load_dataset([heldout], preprocess)
    outputs = infer(state, test, train_config.batch_size)
    result = segment_dataset(outputs.reconstruction_slices(), BrightRule(),
                             hist_config)
    result.histogram.to_csv(os.path.join(out_dir, 'histogram_heldout.csv'))
    opened = Opening(SE_SIZE).apply_all(result.masks)
    write_mask_dir(result.masks, os.path.join(out_dir, 'masks'))
    write_mask_dir(opened, os.path.join(out_dir, 'masks_post'))

    truth = list(load_dataset_masks([heldout], preprocess).values())
    dice, dice_std = aggregate(score_masks(result.masks, truth, SLICE_WISE))
    dice_post, dice_post_std = aggregate(score_masks(opened, truth,
                                                     SLICE_WISE))
    overlap = float(soft_overlap(outputs.fence, outputs.wild))
    n_peaks = len(result.peaks) if result.peaks is not None else 0

    report = {
        'seed': seed,
        'n': n,
        'cycles': len(history.cycles),
        'threshold': result.thresholds['*'],
        'dice': dice,
        'dice_std': dice_std,
        'dice_post': dice_post,
        'dice_post_std': dice_post_std,
        'soft_overlap': overlap,
        'n_peaks': n_peaks,
        'epochs_per_cycle': [train_config.epochs_per_D_step,
                             train_config.epochs_per_M_step],
        'learning_rate': train_config.learning_rate,
        'checks': {
            'dice': dice >= MIN_DICE,
            'postproc': dice - dice_post <= MAX_POSTPROC_DROP,
            'disjoincy': overlap < MAX_SOFT_OVERLAP,
            'peaks': n_peaks >= MIN_PEAKS,
        },
    }
    with open(os.path.join(out_dir, 'report.json'), 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('slice-wise Dice %.4f +/- %.4f, after opening %.4f +/- '
                '%.4f', dice, dice_std, dice_post, dice_post_std)
    logger.info('soft overlap %.4f, %d histogram peaks', overlap, n_peaks)
    return report


def _outputs(root):
    """Relative paths of the files a reproducibility check compares."""
    found = []
    for dirpath, _, files in os.walk(root):
        rel = os.path.relpath(dirpath, root)
        for name in files:
            path = os.path.normpath(os.path.join(rel, name))
            if (name.startswith(COMPARED_PREFIXES) or
                    path.split(os.sep)[0] in COMPARED_DIRS):
                found.append(path)
    return sorted(found)


def compare_runs(a, b):
    """Returns the compared files whose bytes differ between two runs."""
    files_a, files_b = _outputs(a), _outputs(b)
    differing = sorted(set(files_a) ^ set(files_b))
    for path in files_a:
        if path not in files_b:
            continue
        with open(os.path.join(a, path), 'rb') as fa, \
                open(os.path.join(b, path), 'rb') as fb:
            if fa.read() != fb.read():
                differing.append(path)
    logger.info('compared %d files', len(files_a))
    return differing


if __name__ == '__main__':

    args = docopt(__doc__)
    logging.basicConfig(
        level=logging.DEBUG if args['--verbose'] else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    out = args['--out']
    n = int(args['--n'])
    seed = int(args['--seed'])

    report = run_experiment(os.path.join(out, 'first'), n, seed)
    passed = all(report['checks'].values())
    if args['--repeat']:
        run_experiment(os.path.join(out, 'second'), n, seed)
        differing = compare_runs(os.path.join(out, 'first'),
                                 os.path.join(out, 'second'))
        if differing:
            logger.error('runs differ in %d files: %s', len(differing),
                         ', '.join(differing[:10]))
        passed = passed and not differing

    for name, ok in sorted(report['checks'].items()):
        print(f'{name}: {"pass" if ok else "FAIL"}')
    sys.exit(0 if passed else 1)
