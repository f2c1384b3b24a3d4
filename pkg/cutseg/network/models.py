"""
The selective-cut network and its discriminator.

The main module is a U-Net style encoder with two mirrored decoders. The
"fence" decoder produces an image that must pass for a member of the
reference distribution; the "wild" decoder collects what the fence cut
leaves out. A 1x1 convolution with a sigmoid recombines both cuts into the
reduced reconstruction that later gets thresholded.

The discriminator repeats the encoder architecture and scores each image
with a single tanh unit: +1 for reference-like, -1 for generated.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from cutseg.data.images import Slice
from cutseg.errors import ConfigError, InvalidArgumentError, NumericalFailure
from cutseg.network.layers import (DoubleConv, SeededDropout, UpBlock,
                                   check_finite)

logger = logging.getLogger(__name__)


@dataclass
class NetworkConfig:
    """Architecture of the main module and discriminator.

    Parameters
    ----------
    input_size : (int, int)
      slice height and width; divisible by pool_kernel ** levels
    encoder_channels : tuple of ints
      feature maps per encoder block, strictly increasing
    transition_channels : int
      feature maps of the two bottleneck convolutions
    conv_kernel, pool_kernel : int
    dropout_rate : float
      applied after every encoder pooling layer while training
    skip_connections : bool
      concatenate encoder features into both decoders
    bn_momentum : float
      fraction of the running statistics kept at every update
    """
    input_size: Tuple[int, int] = (64, 64)
    encoder_channels: Tuple[int, ...] = (32, 64, 128, 256)
    transition_channels: int = 512
    conv_kernel: int = 3
    pool_kernel: int = 2
    dropout_rate: float = 0.3
    skip_connections: bool = True
    bn_momentum: float = 0.99

    @property
    def levels(self):
        return len(self.encoder_channels)

    @property
    def divisor(self):
        return self.pool_kernel ** self.levels

    def validate(self):
        violations = []
        chans = list(self.encoder_channels)
        if not chans or any(c <= 0 for c in chans):
            violations.append('network.encoder_channels must be a non-empty '
                              'list of positive ints')
        elif any(b <= a for a, b in zip(chans, chans[1:])):
            violations.append('network.encoder_channels must be strictly '
                              f'increasing, got {chans}')
        if self.transition_channels <= 0:
            violations.append('network.transition_channels must be positive')
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            violations.append('network.conv_kernel must be odd, got '
                              f'{self.conv_kernel}')
        if self.pool_kernel < 2:
            violations.append('network.pool_kernel must be >= 2, got '
                              f'{self.pool_kernel}')
        if not 0 <= self.dropout_rate < 1:
            violations.append('network.dropout_rate must be in [0, 1), got '
                              f'{self.dropout_rate}')
        if not 0 <= self.bn_momentum < 1:
            violations.append('network.bn_momentum must be in [0, 1)')
        if len(self.input_size) != 2 or any(
                s <= 0 or (self.pool_kernel >= 2 and chans and
                           s % self.divisor) for s in self.input_size):
            violations.append(
                f'network.input_size {tuple(self.input_size)} must be '
                f'positive and divisible by {self.pool_kernel}^'
                f'{len(chans)}')
        return violations


class Encoder(nn.Module):
    """Down-sampling path: blocks of two conv-BN-ReLU layers, each followed
    by max pooling and dropout, then the transition convolutions."""

    def __init__(self, config):
        super().__init__()
        k, m = config.conv_kernel, config.bn_momentum
        blocks = []
        in_ch = 1
        for ch in config.encoder_channels:
            blocks.append(DoubleConv(in_ch, ch, k, m))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(config.pool_kernel)
        self.dropout = SeededDropout(config.dropout_rate)
        self.transition = DoubleConv(in_ch, config.transition_channels, k, m)

    def forward(self, x, generator=None, name='encoder'):
        skips = []
        for i, block in enumerate(self.blocks, 1):
            x = check_finite(block(x), f'{name}.block{i}')
            skips.append(x)
            x = self.dropout(self.pool(x), generator)
        x = check_finite(self.transition(x), f'{name}.transition')
        return x, skips


class CutDecoder(nn.Module):
    """Up-sampling path mirroring the encoder, ending in a 1-channel sigmoid
    image."""

    def __init__(self, config):
        super().__init__()
        ups = []
        in_ch = config.transition_channels
        for ch in reversed(config.encoder_channels):
            ups.append(UpBlock(in_ch, ch, config.conv_kernel,
                               config.pool_kernel, config.bn_momentum,
                               config.skip_connections))
            in_ch = ch
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x, skips, name='decoder'):
        for i, (up, skip) in enumerate(zip(self.ups, reversed(skips)), 1):
            x = check_finite(up(x, skip), f'{name}.up{i}')
        return torch.sigmoid(self.head(x))


class MainModule(nn.Module):
    """Encoder, wild and fence decoders, and the reconstructor."""

    def __init__(self, config):
        super().__init__()
        self.encoder = Encoder(config)
        self.wild = CutDecoder(config)
        self.fence = CutDecoder(config)
        self.reconstructor = nn.Conv2d(2, 1, 1, bias=True)

    def forward(self, x, generator=None):
        bottom, skips = self.encoder(x, generator)
        fence = check_finite(self.fence(bottom, skips, 'fence'), 'fence')
        wild = check_finite(self.wild(bottom, skips, 'wild'), 'wild')
        recon = torch.sigmoid(self.reconstructor(torch.cat([fence, wild],
                                                           dim=1)))
        return fence, wild, check_finite(recon, 'reconstructor')


class Discriminator(nn.Module):
    """Encoder-shaped critic with one dense tanh unit."""

    def __init__(self, config):
        super().__init__()
        self.encoder = Encoder(config)
        h, w = config.input_size
        flat = config.transition_channels * (h // config.divisor) * \
            (w // config.divisor)
        self.dense = nn.Linear(flat, 1)

    def forward(self, x, generator=None):
        bottom, _ = self.encoder(x, generator, 'disc.encoder')
        return torch.tanh(self.dense(torch.flatten(bottom, 1))).squeeze(1)


@dataclass
class ModelState:
    """All learnable weights of the main module and the discriminator, their
    batch-normalization statistics and the optimizer step counter."""
    config: NetworkConfig
    main: MainModule
    disc: Discriminator
    step_counter: int = 0

    @property
    def main_weights(self):
        return dict(self.main.named_parameters())

    @property
    def disc_weights(self):
        return dict(self.disc.named_parameters())

    @property
    def batchnorm_stats(self):
        stats = {f'main.{k}': v for k, v in self.main.named_buffers()}
        stats.update({f'disc.{k}': v for k, v in self.disc.named_buffers()})
        return stats

    def named_parameters(self):
        for k, p in self.main.named_parameters():
            yield f'main.{k}', p
        for k, p in self.disc.named_parameters():
            yield f'disc.{k}', p


@dataclass
class ForwardOutputs:
    """Fence cut, wild cut and reconstruction of a batch, each (N, 1, H, W).
    """
    fence: torch.Tensor
    wild: torch.Tensor
    reconstruction: torch.Tensor
    keys: Optional[List[tuple]] = field(default=None, repr=False)

    def _slices(self, t):
        keys = self.keys or [('', i) for i in range(t.shape[0])]
        arr = t.detach().cpu().numpy()
        return [Slice(arr[i, 0], sid, idx) for i, (sid, idx) in
                enumerate(keys)]

    def fence_slices(self):
        return self._slices(self.fence)

    def wild_slices(self):
        return self._slices(self.wild)

    def reconstruction_slices(self):
        return self._slices(self.reconstruction)


def _initialize(module, generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


def init_model(config, seed):
    """Builds a freshly initialized model.

    Weights are Glorot-uniform, biases zero, batch-norm scale 1 and shift 0.
    The result depends only on `config` and `seed`.

    Parameters
    ----------
    config : NetworkConfig
    seed : int

    Returns
    -------
    state : ModelState
    """
    violations = config.validate()
    if violations:
        raise ConfigError(violations)
    generator = torch.Generator().manual_seed(int(seed))
    # module constructors draw default initializations from the global
    # generator; isolate them since every value is overwritten below
    with torch.random.fork_rng(devices=[]):
        main = MainModule(config)
        disc = Discriminator(config)
    _initialize(main, generator)
    _initialize(disc, generator)
    n_main = sum(p.numel() for p in main.parameters())
    n_disc = sum(p.numel() for p in disc.parameters())
    logger.debug('initialized model: %d main / %d discriminator parameters',
                 n_main, n_disc)
    return ModelState(config, main, disc)


def as_batch(batch, config):
    """Stacks slices (or passes a tensor through) into an (N, 1, H, W)
    float tensor, checking the spatial size against `config`.

    Returns
    -------
    x : torch.Tensor
    keys : list of (subject_id, index) or None
    """
    keys = None
    if torch.is_tensor(batch):
        x = batch if batch.dim() == 4 else batch.unsqueeze(1)
    else:
        batch = list(batch)
        if not batch:
            raise InvalidArgumentError('batch must not be empty')
        keys = [s.key for s in batch]
        x = torch.from_numpy(np.stack([s.pixels for s in batch]))[:, None]
    if x.shape[0] == 0:
        raise InvalidArgumentError('batch must not be empty')
    if x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(config.input_size):
        raise InvalidArgumentError(
            f'batch has shape {tuple(x.shape)}, expected (N, 1, '
            f'{config.input_size[0]}, {config.input_size[1]})')
    return x, keys


def _generator(seed):
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def forward_main(state, batch, training=False, seed=0):
    """Runs the main module on a batch.

    Parameters
    ----------
    state : ModelState
    batch : list of Slice or torch.Tensor
    training : bool
      dropout active and batch statistics used (and the running statistics
      updated); the returned tensors keep their autograd graph
    seed : int or torch.Generator
      dropout randomness when training

    Returns
    -------
    outputs : ForwardOutputs
    """
    x, keys = as_batch(batch, state.config)
    state.main.train(training)
    with torch.set_grad_enabled(training and torch.is_grad_enabled()):
        fence, wild, recon = state.main(x, _generator(seed) if training
                                        else None)
    return ForwardOutputs(fence, wild, recon, keys)


def infer(state, slices, batch_size=None):
    """Inference-mode forward pass over any number of slices, in batches of
    `batch_size` (all at once when None).

    Returns
    -------
    outputs : ForwardOutputs
      concatenated over all batches, keys preserved
    """
    slices = list(slices)
    if not slices:
        raise InvalidArgumentError('nothing to run the network on')
    size = batch_size or len(slices)
    parts = [forward_main(state, slices[i:i + size])
             for i in range(0, len(slices), size)]
    if len(parts) == 1:
        return parts[0]
    return ForwardOutputs(torch.cat([p.fence for p in parts]),
                          torch.cat([p.wild for p in parts]),
                          torch.cat([p.reconstruction for p in parts]),
                          [k for p in parts for k in p.keys])


def forward_discriminator(state, batch, training=False, seed=None):
    """Scores a batch with the discriminator.

    Gradients flow back into `batch` when it is a tensor that requires
    them, which is how the fence decoder learns through a frozen critic.

    Returns
    -------
    scores : torch.Tensor, shape (N,)
      each in (-1, 1)
    """
    x, _ = as_batch(batch, state.config)
    state.disc.train(training)
    track = training or x.requires_grad
    with torch.set_grad_enabled(track and torch.is_grad_enabled()):
        return state.disc(x, _generator(seed) if training else None)


@contextmanager
def frozen(module):
    """Freezes a module's parameters and switches it to inference mode for
    the duration of the block, while gradients still flow through it."""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)
        module.train(was_training)


def backward(state, loss, frozen_parts=()):
    """Computes the gradient of a scalar loss for every trainable parameter.

    Parameters
    ----------
    state : ModelState
    loss : torch.Tensor or float
      scalar built from `forward_main` / `forward_discriminator`
    frozen_parts : iterable of {'main', 'disc'}
      parts that receive no gradient at all

    Returns
    -------
    gradients : dict
      parameter name -> gradient tensor; unreachable parameters get zeros
    """
    frozen_parts = set(frozen_parts)
    trainable = [(name, p) for name, p in state.named_parameters()
                 if p.requires_grad and name.split('.', 1)[0]
                 not in frozen_parts]
    if not trainable:
        return {}
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in trainable}
    if loss.numel() != 1:
        raise InvalidArgumentError('loss must be a scalar')
    if not torch.isfinite(loss):
        raise NumericalFailure('non-finite loss', where='loss')
    grads = torch.autograd.grad(loss, [p for _, p in trainable],
                                allow_unused=True)
    out = {}
    for (name, p), g in zip(trainable, grads):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NumericalFailure('non-finite gradient', where=name)
        out[name] = g
    return out
