"""Attention, residual and domain-classifier building blocks.

These are the pieces layered onto the plain detector trunk: a squeeze-style
channel gate, a bottleneck residual unit, and a per-scale domain head that
trains through a gradient reversal so the shared features drift toward
domain-invariance instead of domain-separability.
"""

from __future__ import annotations

import numpy as np

from .layers import BatchNorm2d, Conv2d, Linear, Module
from .tensor import (
    Tensor,
    global_avg_pool,
    gradient_reversal,
    relu,
    reshape,
    sigmoid,
)

__all__ = [
    "ChannelAttentionBlock",
    "ResidualBlock",
    "DomainClassifierHead",
    "gradient_reversal",
]


class ChannelAttentionBlock(Module):
    """Per-channel sigmoid gate computed from globally pooled features.

    The pooled [N, C, 1, 1] descriptor passes through a 1x1 bottleneck
    (reduction ``ratio``, floor-clamped to one channel) and back up to C,
    and the resulting gate multiplies the input channel-wise.  Both 1x1
    convolutions are bias-free so an all-zero input yields gate 0.5
    everywhere rather than a weight-dependent offset.
    """

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 16):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if ratio < 1:
            raise ValueError(f"ratio must be >= 1, got {ratio}")
        self.channels = channels
        self.ratio = ratio
        hidden = max(1, channels // ratio)
        self.squeeze = Conv2d(channels, hidden, 1, rng, bias=False)
        self.excite = Conv2d(hidden, channels, 1, rng, bias=False)

    def gate(self, x: Tensor) -> Tensor:
        """The [N, C, 1, 1] gate tensor, exposed for inspection and tests."""
        return sigmoid(self.excite(relu(self.squeeze(global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"channel attention built for {self.channels} channels, input has {x.shape[1]}"
            )
        return x * self.gate(x)


class ResidualBlock(Module):
    """Bottleneck residual unit: 1x1 -> BN -> ReLU -> 3x3 -> BN -> 1x1, plus skip.

    There is deliberately no activation after the addition, and all three
    convolutions are bias-free, so zeroing every weight turns the block into
    an exact identity.
    """

    def __init__(self, channels: int, rng: np.random.Generator, mid_channels: int | None = None):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        mid = mid_channels if mid_channels is not None else max(1, channels // 2)
        if mid < 1:
            raise ValueError(f"mid_channels must be >= 1, got {mid}")
        self.channels = channels
        self.mid_channels = mid
        self.reduce = Conv2d(channels, mid, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(mid)
        self.conv = Conv2d(mid, mid, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(mid)
        self.expand = Conv2d(mid, channels, 1, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"residual block built for {self.channels} channels, input has {x.shape[1]}"
            )
        branch = self.expand(self.bn2(self.conv(relu(self.bn1(self.reduce(x))))))
        return x + branch


class DomainClassifierHead(Module):
    """Domain logits from a detector feature map, trained adversarially.

    A gradient reversal sits at the entry: the forward pass is the identity,
    the backward pass multiplies incoming gradients by ``-grl_lambda`` so the
    trunk below learns to *confuse* this head.  ``reverse=False`` removes the
    flip (the head then trains the trunk to separate domains, the control
    arm for ablations).

    The head itself is a two-conv trunk (7x7 then 5x5, ReLU after each), a
    parallel attention branch of the same shape applied to the trunk output,
    and a fusion of the two global averages by elementwise product feeding a
    linear layer.
    """

    def __init__(
        self,
        in_channels: int,
        num_domains: int,
        rng: np.random.Generator,
        grl_lambda: float = 0.1,
        reverse: bool = True,
    ):
        super().__init__()
        if in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {in_channels}")
        if num_domains < 2:
            raise ValueError(f"num_domains must be >= 2, got {num_domains}")
        if grl_lambda < 0:
            raise ValueError(f"grl_lambda must be >= 0, got {grl_lambda}")
        self.in_channels = in_channels
        self.num_domains = num_domains
        self.grl_lambda = grl_lambda
        self.reverse = reverse
        c = in_channels
        self.trunk_a = Conv2d(c, c, 7, rng, padding=3)
        self.trunk_b = Conv2d(c, c, 5, rng, padding=2)
        self.att_a = Conv2d(c, c, 7, rng, padding=3)
        self.att_b = Conv2d(c, c, 5, rng, padding=2)
        self.fc = Linear(c, num_domains, rng)

    def forward(self, feat: Tensor) -> Tensor:
        if feat.shape[1] != self.in_channels:
            raise ValueError(
                f"domain head built for {self.in_channels} channels, input has {feat.shape[1]}"
            )
        h = gradient_reversal(feat, self.grl_lambda) if self.reverse else feat
        trunk = relu(self.trunk_b(relu(self.trunk_a(h))))
        att = relu(self.att_b(relu(self.att_a(trunk))))
        fused = global_avg_pool(trunk) * global_avg_pool(att)
        n = fused.shape[0]
        return self.fc(reshape(fused, (n, self.in_channels)))
