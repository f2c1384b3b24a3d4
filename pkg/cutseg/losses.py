"""
Training objectives.

Scores come from the tanh discriminator, so they live in (-1, 1): +1 means
"reference-like", -1 means "generated". Images are sigmoid outputs in
[0, 1]. Every loss is a differentiable torch expression and also accepts
plain sequences / arrays for direct evaluation.
"""
import json
from dataclasses import asdict, dataclass
from typing import Optional

import torch

from cutseg.errors import InvalidArgumentError

DICE_EPS = 1e-7


def _scores(values, name):
    t = values if torch.is_tensor(values) else torch.as_tensor(
        values, dtype=torch.float64)
    t = t.reshape(-1)
    if t.numel() == 0:
        raise InvalidArgumentError(f'{name} must not be empty')
    return t


def _images(a, b):
    a = a if torch.is_tensor(a) else torch.as_tensor(a, dtype=torch.float64)
    b = b if torch.is_tensor(b) else torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f'shape mismatch: {tuple(a.shape)} vs '
                                   f'{tuple(b.shape)}')
    if a.numel() == 0:
        raise InvalidArgumentError('images must not be empty')
    return a, b


def loss_fence(d_scores_fake):
    """Mean absolute distance of the fake scores from +1; the fence decoder
    minimizes it to pass as reference."""
    s = _scores(d_scores_fake, 'd_scores_fake')
    return torch.abs(s - 1).mean()


def loss_disjoincy(fence, wild, eps=DICE_EPS):
    """Soft Dice overlap of the two cuts, 2 * sum(a * b) / (sum a + sum b).

    Minimizing it pushes the cuts towards complementary supports.
    """
    a, b = _images(fence, wild)
    return 2 * (a * b).sum() / (a.sum() + b.sum() + eps)


def loss_reconstruction(inputs, recon):
    """Per-pixel mean squared error over the whole batch."""
    a, b = _images(inputs, recon)
    return ((a - b) ** 2).mean()


def mae_to_targets(scores, targets):
    """Mean absolute error between scores and their +1/-1 targets."""
    s = _scores(scores, 'scores')
    t = targets if torch.is_tensor(targets) else torch.as_tensor(
        targets, dtype=s.dtype)
    t = t.reshape(-1).to(s.dtype)
    if t.shape != s.shape:
        raise InvalidArgumentError('scores and targets differ in length')
    return torch.abs(s - t).mean()


def loss_discriminator(d_fake, d_real):
    """Discriminator MAE with target -1 for the n fakes and +1 for the m
    reference images, averaged over n + m."""
    fake = _scores(d_fake, 'd_fake')
    real = _scores(d_real, 'd_real').to(fake.dtype)
    scores = torch.cat([fake, real])
    targets = torch.cat([-torch.ones_like(fake), torch.ones_like(real)])
    return mae_to_targets(scores, targets)


def soft_overlap(fence, wild):
    """Mean pixel-wise minimum of the two cuts; near zero when the cuts are
    disjoint."""
    a, b = _images(fence, wild)
    return torch.minimum(a, b).mean()


@dataclass
class LossReport:
    """Loss values of one optimization epoch. Values a phase does not
    compute are None."""
    loss_fence: Optional[float] = None
    loss_disjoincy: Optional[float] = None
    loss_reconstruction: Optional[float] = None
    loss_discriminator: Optional[float] = None
    n: int = 0
    m: int = 0

    def main_total(self, weights=(1.0, 1.0, 1.0)):
        parts = (self.loss_fence, self.loss_disjoincy,
                 self.loss_reconstruction)
        return sum(w * v for w, v in zip(weights, parts) if v is not None)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)
