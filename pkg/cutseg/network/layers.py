"""Building blocks shared by the main module and the discriminator."""
import torch
from torch import nn

from cutseg.errors import NumericalFailure


def check_finite(x, where):
    if not torch.isfinite(x).all():
        raise NumericalFailure('non-finite activation', where=where)
    return x


class SeededDropout(nn.Module):
    """Inverted dropout that draws its mask from an explicit generator.

    Pass the generator to `forward`; without one the global torch
    generator is used.
    """

    def __init__(self, p):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f'dropout rate must be in [0, 1), got {p}')
        self.p = p

    def forward(self, x, generator=None):
        if not self.training or self.p == 0:
            return x
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype,
                          device=x.device) >= self.p
        return x * keep / (1 - self.p)

    def extra_repr(self):
        return f'p={self.p}'


class ConvBNReLU(nn.Module):
    """3x3 convolution (same padding), batch normalization, ReLU."""

    def __init__(self, in_channels, out_channels, kernel, bn_momentum):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel,
                              padding=kernel // 2)
        # torch momentum weights the new batch; 0.99 keeps 99% of the old
        # running value
        self.bn = nn.BatchNorm2d(out_channels, momentum=1 - bn_momentum)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


class DoubleConv(nn.Module):
    def __init__(self, in_channels, out_channels, kernel, bn_momentum):
        super().__init__()
        self.conv1 = ConvBNReLU(in_channels, out_channels, kernel,
                                bn_momentum)
        self.conv2 = ConvBNReLU(out_channels, out_channels, kernel,
                                bn_momentum)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class UpBlock(nn.Module):
    """2x transposed-convolution upsampling followed by a double conv over
    the (optionally skip-concatenated) features."""

    def __init__(self, in_channels, out_channels, kernel, pool, bn_momentum,
                 skip):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, pool,
                                     stride=pool)
        self.skip = skip
        merged = 2 * out_channels if skip else out_channels
        self.convs = DoubleConv(merged, out_channels, kernel, bn_momentum)

    def forward(self, x, skip=None):
        x = self.up(x)
        if self.skip:
            x = torch.cat([x, skip], dim=1)
        return self.convs(x)
