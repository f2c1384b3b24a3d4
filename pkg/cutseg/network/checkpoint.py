"""
Checkpoint files.

A checkpoint is a single torch-serialized dictionary (little-endian zip
container)::

    format_version   int, currently 1
    network_config   NetworkConfig fields
    main, disc       state_dicts (parameters and batch-norm statistics)
    step_counter     optimizer steps taken so far
    optimizers       {'main': ..., 'disc': ...} Adam state_dicts or None
    position         training position {'stage', 'cycle_index', 'phase'}
                     or None

The archive is serialized in memory before being written so that identical
states produce byte-identical files regardless of the target file name.
"""
import io
import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional

import torch

from cutseg.errors import CutSegError
from cutseg.network.models import NetworkConfig, init_model

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    state: object
    optimizers: Optional[dict] = None
    position: Optional[dict] = None


def save_checkpoint(path, state, optimizers=None, position=None):
    """Writes `state` (and optionally optimizer state and training
    position) to `path`.

    Parameters
    ----------
    path : str
    state : ModelState
    optimizers : Optimizers, optional
    position : dict, optional
    """
    payload = {
        'format_version': FORMAT_VERSION,
        'network_config': asdict(state.config),
        'main': state.main.state_dict(),
        'disc': state.disc.state_dict(),
        'step_counter': int(state.step_counter),
        'optimizers': (optimizers.state_dict() if optimizers is not None
                       else None),
        'position': position,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = f'{path}.partial'
    with open(tmp, 'wb') as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)
    logger.debug('saved checkpoint %s (step %d)', path, state.step_counter)


def load_checkpoint(path):
    """Reads a checkpoint written by `save_checkpoint`.

    Returns
    -------
    checkpoint : Checkpoint
      `state` is a ModelState; `optimizers` is the raw optimizer
      state_dict (load it with `Optimizers.load_state_dict`)
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(2, 'No such file', path)
    payload = torch.load(path, map_location='cpu', weights_only=True)
    version = payload.get('format_version')
    if version != FORMAT_VERSION:
        raise CutSegError(f'{path}: unsupported checkpoint format version '
                          f'{version!r} (expected {FORMAT_VERSION})')
    fields = dict(payload['network_config'])
    fields['input_size'] = tuple(fields['input_size'])
    fields['encoder_channels'] = tuple(fields['encoder_channels'])
    state = init_model(NetworkConfig(**fields), seed=0)
    state.main.load_state_dict(payload['main'])
    state.disc.load_state_dict(payload['disc'])
    state.step_counter = int(payload['step_counter'])
    return Checkpoint(state, payload.get('optimizers'),
                      payload.get('position'))
