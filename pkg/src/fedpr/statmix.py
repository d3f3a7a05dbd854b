"""Channel statistics and feature-map renormalization transforms.

A feature map is summarized per channel by its spatial mean and standard
deviation.  The two transforms here re-normalize a map so that its channel
statistics match a target: ``transform_personalized`` pushes a map toward
statistics interpolated between two samples, ``transform_shared`` stamps
one map's statistics onto another map's spatial content.  Both are
differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_scalar,
    broadcast_channels,
    divide,
    global_average_pool,
    multiply,
    reshape,
    sqrt,
    subtract,
)
from .errors import DomainError, ShapeError

# Folded into the standard deviation as sqrt(var + EPS^2) so that
# zero-variance channels stay differentiable and std >= EPS always holds.
EPS = 1e-5


@dataclass
class ChannelStats:
    """Per-channel mean and standard deviation, shaped (B, C) or (C,)."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.data.shape != self.std.data.shape:
            raise ShapeError(
                f"ChannelStats: mean {self.mean.data.shape} and std {self.std.data.shape} differ"
            )

    @property
    def channels(self) -> int:
        return self.mean.data.shape[-1]


def _as_batched(e: Tensor) -> tuple[Tensor, bool]:
    if e.data.ndim == 3:
        c, h, w = e.data.shape
        return reshape(e, (1, c, h, w)), True
    if e.data.ndim == 4:
        return e, False
    raise ShapeError(f"expected a (C,H,W) or (B,C,H,W) map, got {e.data.shape}")


def stats_and_normalized(e: Tensor) -> tuple[ChannelStats, Tensor]:
    """Channel statistics of a (B, C, H, W) map plus its normalized form.

    The normalized map (e - mean) / std has zero channel mean and unit-ish
    channel deviation; both transforms are affine maps of it, so computing
    it once lets callers reuse the common subexpression.
    """
    _, _, h, w = e.data.shape
    if h * w == 0:
        raise ShapeError(f"channel_stats: empty spatial extent in {e.data.shape}")
    mean = global_average_pool(e)
    centered = subtract(e, broadcast_channels(mean, (h, w)))
    var = global_average_pool(multiply(centered, centered))
    std = sqrt(add_scalar(var, EPS * EPS))
    normalized = divide(centered, broadcast_channels(std, (h, w)))
    return ChannelStats(mean=mean, std=std), normalized


def channel_stats(e: Tensor) -> ChannelStats:
    """Spatial mean and sqrt(population variance + EPS^2) per channel."""
    batched, squeeze = _as_batched(e)
    _, c, h, w = batched.data.shape
    if h * w == 0:
        raise ShapeError(f"channel_stats: empty spatial extent in {e.data.shape}")
    mean = global_average_pool(batched)
    centered = subtract(batched, broadcast_channels(mean, (h, w)))
    var = global_average_pool(multiply(centered, centered))
    std = sqrt(add_scalar(var, EPS * EPS))
    if squeeze:
        mean = reshape(mean, (c,))
        std = reshape(std, (c,))
    return ChannelStats(mean=mean, std=std)


def interpolate_stats(s_a: ChannelStats, s_b: ChannelStats, lam) -> ChannelStats:
    """Blend two statistics: lam*s_a + (1-lam)*s_b.

    ``lam`` is a scalar in [0, 1] or, for batched statistics, one
    coefficient per sample.  The coefficients are constants, not part of
    the gradient graph.
    """
    if s_a.mean.data.shape != s_b.mean.data.shape:
        raise ShapeError(
            f"interpolate_stats: channel shapes {s_a.mean.data.shape} and "
            f"{s_b.mean.data.shape} differ"
        )
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < 0.0) or np.any(lam_arr > 1.0):
        raise DomainError(f"interpolation coefficient outside [0, 1]: {lam}")
    shape = s_a.mean.data.shape
    if lam_arr.ndim == 0:
        lam_full = np.broadcast_to(lam_arr, shape).copy()
    elif len(shape) == 2 and lam_arr.shape == (shape[0],):
        lam_full = np.broadcast_to(lam_arr[:, None], shape).copy()
    else:
        raise ShapeError(
            f"interpolate_stats: coefficient shape {lam_arr.shape} does not match {shape}"
        )
    la = Tensor(lam_full)
    lb = Tensor(1.0 - lam_full)
    mean = add(multiply(la, s_a.mean), multiply(lb, s_b.mean))
    std = add(multiply(la, s_a.std), multiply(lb, s_b.std))
    return ChannelStats(mean=mean, std=std)


def _renormalize(content: Tensor, target: ChannelStats) -> Tensor:
    """target.std * (content - mean(content)) / std(content) + target.mean."""
    batched, squeeze = _as_batched(content)
    b, c, h, w = batched.data.shape
    if target.channels != c:
        raise ShapeError(
            f"channel mismatch: map has {c} channels, statistics have {target.channels}"
        )
    t_mean, t_std = target.mean, target.std
    if t_mean.data.ndim == 1:
        t_mean = reshape(t_mean, (1, c))
        t_std = reshape(t_std, (1, c))
    if t_mean.data.shape[0] != b:
        raise ShapeError(
            f"batch mismatch: map has batch {b}, statistics have {t_mean.data.shape[0]}"
        )
    own = channel_stats(batched)
    normalized = divide(
        subtract(batched, broadcast_channels(own.mean, (h, w))),
        broadcast_channels(own.std, (h, w)),
    )
    out = add(
        multiply(broadcast_channels(t_std, (h, w)), normalized),
        broadcast_channels(t_mean, (h, w)),
    )
    if squeeze:
        out = reshape(out, (c, h, w))
    return out


def transform_personalized(e: Tensor, stats_star: ChannelStats) -> Tensor:
    """Re-normalize ``e`` to interpolated target statistics.

    The output keeps the spatial layout of ``e`` while its channel mean and
    standard deviation match ``stats_star`` (up to the EPS floor).
    """
    return _renormalize(e, stats_star)


def transform_shared(e_prime: Tensor, stats_of_e: ChannelStats) -> Tensor:
    """Stamp the statistics of one map onto another map's spatial content.

    Spatial content comes from ``e_prime``; channel statistics come from
    the map that produced ``stats_of_e``.
    """
    return _renormalize(e_prime, stats_of_e)
