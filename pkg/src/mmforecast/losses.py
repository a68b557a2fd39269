"""Training objectives: K-sample moment estimation, MR1/MR2 moment
reconstruction, non-saturating adversarial losses and segmentation
cross-entropy. Every loss has a value-and-gradient form used by the
trainer; the plain functions implement the public contracts."""

from dataclasses import dataclass

import numpy as np

from .core import LogitVolume, SampleSet, SegMap

SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_mr: float = 100.0
    lambda_gan: float = 10.0
    variance_floor: float = 1e-4

    def __post_init__(self):
        if self.lambda_mr < 0 or self.lambda_gan < 0:
            raise ValueError("loss weights must be non-negative")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")


@dataclass(frozen=True)
class MomentPair:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError("mean/var shape mismatch")
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")


def moments_from_stack(stack: np.ndarray, with_variance=True):
    """Sample mean and unbiased (K-1 denominator) variance over axis 0."""
    k = stack.shape[0]
    mu = stack.mean(axis=0)
    if not with_variance:
        return mu, None
    if k < 2:
        raise ValueError("variance needs K >= 2 samples")
    var = np.square(stack - mu).sum(axis=0) / (k - 1)
    return mu, var


def sample_moments(samples: SampleSet, with_variance=True) -> MomentPair:
    mu, var = moments_from_stack(samples.stack(), with_variance=with_variance)
    if var is None:
        var = np.zeros_like(mu)
    return MomentPair(mean=mu, var=var)


def mr1_loss(y: np.ndarray, m: MomentPair) -> float:
    """Mean squared error between target and sample mean (variance unused)."""
    return float(np.mean(np.square(y - m.mean)))


def mr2_loss(y: np.ndarray, m: MomentPair, variance_floor=1e-4) -> float:
    """Gaussian negative log-likelihood of the target under the sampled
    moments, mean over elements; variance clamped below by the floor."""
    v = np.maximum(m.var, variance_floor)
    return float(np.mean(np.square(y - m.mean) / (2.0 * v) + 0.5 * np.log(v)))


def mr1_value_and_grad(y: np.ndarray, stack: np.ndarray):
    """Returns (loss, d loss / d stack) for stack of shape (K, ...)."""
    k = stack.shape[0]
    mu = stack.mean(axis=0)
    diff = mu - y
    loss = float(np.mean(diff * diff))
    dmu = 2.0 * diff / y.size
    return loss, np.broadcast_to(dmu / k, stack.shape).copy()


def mr2_value_and_grad(y: np.ndarray, stack: np.ndarray, variance_floor=1e-4):
    k = stack.shape[0]
    mu, var = moments_from_stack(stack)
    v = np.maximum(var, variance_floor)
    active = (var > variance_floor).astype(stack.dtype)
    diff = y - mu
    loss = float(np.mean(diff * diff / (2.0 * v) + 0.5 * np.log(v)))
    n = y.size
    dmu = (-diff / v) / n
    dvar = ((-diff * diff / (2.0 * v * v)) + 0.5 / v) * active / n
    dstack = dmu / k + dvar * 2.0 * (stack - mu) / (k - 1)
    return loss, dstack


def gan_loss_d(real_scores: np.ndarray, fake_scores: np.ndarray) -> float:
    r = np.clip(real_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    f = np.clip(fake_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(-np.mean(np.log(r)) - np.mean(np.log(1.0 - f)))


def gan_loss_g(fake_scores: np.ndarray) -> float:
    """Non-saturating generator loss, mean over patches and samples."""
    f = np.clip(fake_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(-np.mean(np.log(f)))


def gan_loss_d_grads(real_scores, fake_scores):
    r = np.clip(real_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    f = np.clip(fake_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = float(-np.mean(np.log(r)) - np.mean(np.log(1.0 - f)))
    in_r = (real_scores > SCORE_CLAMP) & (real_scores < 1.0 - SCORE_CLAMP)
    in_f = (fake_scores > SCORE_CLAMP) & (fake_scores < 1.0 - SCORE_CLAMP)
    dreal = np.where(in_r, -1.0 / r, 0.0) / real_scores.size
    dfake = np.where(in_f, 1.0 / (1.0 - f), 0.0) / fake_scores.size
    return loss, dreal, dfake


def gan_loss_g_grads(fake_scores):
    f = np.clip(fake_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = float(-np.mean(np.log(f)))
    in_f = (fake_scores > SCORE_CLAMP) & (fake_scores < 1.0 - SCORE_CLAMP)
    dfake = np.where(in_f, -1.0 / f, 0.0) / fake_scores.size
    return loss, dfake


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_value_and_grad(logits: np.ndarray, gt: np.ndarray, void_id: int):
    """logits (N, C, H, W), gt (N, H, W) of class indices; void excluded.
    Returns (loss, d loss / d logits)."""
    valid = gt != void_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels are void; cross-entropy undefined")
    p = softmax(logits, axis=1)
    ns, ys, xs = np.nonzero(valid)
    cls = gt[ns, ys, xs]
    loss = float(-np.mean(np.log(np.maximum(p[ns, cls, ys, xs], 1e-300))))
    dlogits = p.copy()
    dlogits[ns, cls, ys, xs] -= 1.0
    dlogits *= valid[:, None, :, :] / n_valid
    return loss, dlogits


def cross_entropy_seg(logits: LogitVolume, gt: SegMap) -> float:
    """Mean negative log-softmax of the true class over non-void pixels."""
    if logits.data.shape[1:] != gt.data.shape:
        raise ValueError("logits/gt shape mismatch")
    loss, _ = cross_entropy_value_and_grad(
        logits.data[None], np.asarray(gt.data)[None], gt.table.void_id)
    return loss


def total_g_loss(mr: float, g_adv: float, w: LossWeights) -> float:
    return w.lambda_mr * mr + w.lambda_gan * g_adv
