"""Three-branch detection network: trunk, personalized head, shared head.

Parameter names carry the partition prefixes used throughout the
federation layer: ``ff.*`` for the feature-extractor trunk, ``fp.*`` for
the personalized head and ``fs.*`` for the shared head.

Gradient routing of the three losses:

* the personalized loss reaches ``ff`` and ``fp``;
* the shared loss reaches ``fs`` only (its feature input is detached);
* the adversarial loss reaches ``ff`` only (the shared head's parameters
  are applied as constants).

The routing is realised by returning two numerically identical copies of
the shared-branch log-probabilities, one per gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ParamTensor,
    Tensor,
    add,
    conv2d,
    detach,
    gather_rows,
    global_average_pool,
    linear,
    log_softmax,
    mean_all,
    permute_rows,
    relu,
    scale,
)
from .errors import BatchError, ConfigError, DomainError, LabelError, ShapeError
from .statmix import ChannelStats, channel_stats, interpolate_stats

Array = np.ndarray


@dataclass
class LossWeights:
    """Coefficients of the combined objective: alpha*adv + beta*personal + gamma*shared."""

    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class Batch:
    """A mini-batch of images (B, C, H, W) with integer labels (B,)."""

    images: Tensor
    labels: Array

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.data.ndim != 4:
            raise ShapeError(f"batch images must be 4-d, got {self.images.data.shape}")
        b = self.images.data.shape[0]
        if b < 1:
            raise BatchError("batch must contain at least one sample")
        if self.labels.shape != (b,):
            raise ShapeError(f"labels shape {self.labels.shape} does not match batch size {b}")
        if self.labels.min(initial=0) < 0:
            raise LabelError(f"negative label in batch: {self.labels.min()}")

    @property
    def size(self) -> int:
        return self.images.data.shape[0]


class ForgeryModel:
    """Trunk of two 3x3 conv+relu layers, two pooled linear heads.

    Weights are drawn uniformly in +/- sqrt(1/fan_in) from the given rng
    (in a fixed order, so initialization is reproducible); biases start at
    zero.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int = 1,
        num_classes: int = 2,
        hidden_channels: tuple[int, int] = (8, 16),
    ):
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.hidden_channels = tuple(hidden_channels)
        c1, c2 = self.hidden_channels

        def uniform(shape, fan_in):
            bound = float(np.sqrt(1.0 / fan_in))
            return Tensor(rng.uniform(-bound, bound, size=shape), track_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), track_grad=True)

        self.params: dict[str, ParamTensor] = {}
        for name, tensor in (
            ("ff.conv1.weight", uniform((c1, in_channels, 3, 3), in_channels * 9)),
            ("ff.conv1.bias", zeros((c1,))),
            ("ff.conv2.weight", uniform((c2, c1, 3, 3), c1 * 9)),
            ("ff.conv2.bias", zeros((c2,))),
            ("fp.head.weight", uniform((c2, num_classes), c2)),
            ("fp.head.bias", zeros((num_classes,))),
            ("fs.head.weight", uniform((c2, num_classes), c2)),
            ("fs.head.bias", zeros((num_classes,))),
        ):
            self.params[name] = ParamTensor(name, tensor)

    def named_params(self, prefix: str | None = None) -> list[ParamTensor]:
        if prefix is None:
            return list(self.params.values())
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def param(self, name: str) -> ParamTensor:
        return self.params[name]

    def features(self, images: Tensor) -> Tensor:
        """Trunk forward pass: images -> (B, C, H, W) feature map."""
        h1 = relu(conv2d(images, self.params["ff.conv1.weight"].value, self.params["ff.conv1.bias"].value))
        return relu(conv2d(h1, self.params["ff.conv2.weight"].value, self.params["ff.conv2.bias"].value))

    def _head(self, feat_map: Tensor, prefix: str, frozen: bool = False) -> Tensor:
        return self._pooled_head(global_average_pool(feat_map), prefix, frozen)

    def _pooled_head(self, pooled: Tensor, prefix: str, frozen: bool = False) -> Tensor:
        w = self.params[f"{prefix}.head.weight"].value
        b = self.params[f"{prefix}.head.bias"].value
        if frozen:
            w, b = detach(w), detach(b)
        return linear(pooled, w, b)


@dataclass
class MixedOutputs:
    """Result of a mixed forward pass.

    ``log_probs_s`` and ``log_probs_s_adv`` hold bitwise identical values
    but route gradients differently: the former reaches only the shared
    head, the latter only the trunk.
    """

    log_probs_p: Tensor
    log_probs_s: Tensor | None
    log_probs_s_adv: Tensor | None
    pair_index: Array
    mix_coeff: Array = field(repr=False, default=None)


def pairing_permutation(rng: np.random.Generator, batch_size: int) -> Array:
    """Random permutation of [0, B) with no fixed points (B >= 2)."""
    perm = rng.permutation(batch_size)
    fixed = np.flatnonzero(perm == np.arange(batch_size))
    if fixed.size == 1:
        j = (int(fixed[0]) + 1) % batch_size
        perm[[fixed[0], j]] = perm[[j, fixed[0]]]
    elif fixed.size > 1:
        perm[fixed] = perm[np.roll(fixed, 1)]
    return perm


def forward_mixed(
    model: ForgeryModel,
    batch: Batch,
    rng: np.random.Generator,
    force_lambda: float | None = None,
    compute_shared: bool = True,
    freeze_trunk: bool = False,
) -> MixedOutputs:
    """Forward pass with per-sample statistic mixing against a random partner.

    Each sample i is paired with sample pair_index[i] of the same batch.
    The personalized branch sees the sample's feature map re-normalized to
    statistics interpolated (per-sample coefficient ~ U(0,1), or
    ``force_lambda`` when given) between its own and its partner's; the
    shared branch sees the partner's map carrying the sample's statistics.

    The rng is consumed in a fixed order (pairing first, then mixing
    coefficients), so a fixed seed reproduces the pass bitwise.

    ``freeze_trunk`` cuts the graph below the feature maps; values and
    head gradients are bitwise unchanged, so phases that do not train the
    trunk can skip its backward sweep.
    """
    b = batch.size
    if b < 2:
        raise BatchError(f"statistic mixing needs a batch of at least 2, got {b}")

    feat = model.features(batch.images)
    if freeze_trunk:
        feat = detach(feat)
    pair_index = pairing_permutation(rng, b)
    if force_lambda is None:
        mix = rng.random(b)
    else:
        mix = np.full(b, float(force_lambda))

    # The partner's statistics are a row permutation of the batch's own,
    # and pooling a re-normalized map returns exactly its target channel
    # means: gap(std * normalized + mean) == mean, because the normalized
    # map pools to zero identically (so does its derivative).  The pooled
    # head inputs therefore reduce to the target means, and the full-size
    # transformed maps never need materializing here; the standalone
    # transforms in statmix compute the same composition explicitly.
    stats_own = channel_stats(feat)
    stats_partner = ChannelStats(
        mean=permute_rows(stats_own.mean, pair_index),
        std=permute_rows(stats_own.std, pair_index),
    )
    stats_star = interpolate_stats(stats_own, stats_partner, mix)

    log_probs_p = log_softmax(model._pooled_head(stats_star.mean, "fp"))

    log_probs_s = log_probs_s_adv = None
    if compute_shared:
        # Same values, two gradient paths: detached input for the shared
        # head's own update, frozen head parameters for the trunk's.
        log_probs_s = log_softmax(model._pooled_head(detach(stats_own.mean), "fs"))
        log_probs_s_adv = log_softmax(model._pooled_head(stats_own.mean, "fs", frozen=True))

    return MixedOutputs(
        log_probs_p=log_probs_p,
        log_probs_s=log_probs_s,
        log_probs_s_adv=log_probs_s_adv,
        pair_index=pair_index,
        mix_coeff=mix,
    )


def _check_labels(log_probs: Tensor, labels: Array) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = log_probs.data.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_classes:
        raise LabelError(f"labels outside [0, {n_classes}): {labels}")
    return labels


def loss_personalized(log_probs_p: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy of the personalized branch against the sample labels."""
    labels = _check_labels(log_probs_p, labels)
    return scale(mean_all(gather_rows(log_probs_p, labels)), -1.0)


def loss_shared(log_probs_s: Tensor, labels_of_partner: Array) -> Tensor:
    """Mean cross-entropy of the shared branch against the partner labels.

    By construction of :func:`forward_mixed` this term updates only the
    shared head.
    """
    labels = _check_labels(log_probs_s, labels_of_partner)
    return scale(mean_all(gather_rows(log_probs_s, labels)), -1.0)


def loss_adversarial(log_probs_s: Tensor) -> Tensor:
    """Cross-entropy of the shared branch against the uniform distribution.

    Minimized (value log N) when the shared branch predicts uniformly;
    by construction this term updates only the trunk.
    """
    return scale(mean_all(log_probs_s), -1.0)


def total_loss(lp: Tensor, ls: Tensor, ladv: Tensor, weights: LossWeights) -> Tensor:
    """alpha*ladv + beta*lp + gamma*ls."""
    for name, t in (("lp", lp), ("ls", ls), ("ladv", ladv)):
        if t.data.size != 1 or not np.isfinite(t.data).all():
            raise DomainError(f"total_loss: {name} must be a finite scalar")
    return add(add(scale(ladv, weights.alpha), scale(lp, weights.beta)), scale(ls, weights.gamma))


def infer(model: ForgeryModel, images: Tensor) -> Array:
    """Scores in [0, 1] for the "fake" class from the personalized branch.

    Plain forward pass, no statistic mixing, no randomness: the score is
    the softmax probability of class 1 under the pooled personalized head.
    """
    if images.data.ndim != 4 or images.data.shape[1] != model.in_channels:
        raise ShapeError(
            f"infer: expected (B, {model.in_channels}, H, W) images, got {images.data.shape}"
        )
    log_probs = log_softmax(model._head(model.features(detach(images)), "fp"))
    return np.exp(log_probs.data[:, 1])
