"""View-pair construction: the clean batch plus a stochastically augmented
copy, with exact quarter-turn rotation and separable Gaussian blur for images
and additive Gaussian noise for flat (non-image) data.

Rotations are restricted to exact quarter turns (pure pixel permutations, no
interpolation), so augmented images stay bit-exact and tests can compare
directly. Each sample draws its augmentation from a substream keyed by its
own id, so batch composition never alters the augmentation a sample receives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .numerics import ConfigError, DomainError, Rng, ShapeError, Tensor, as_tensor

__all__ = [
    "AugmentPolicy",
    "rotate90",
    "gaussian_kernel1d",
    "gaussian_blur",
    "make_view_pair",
]

POLICY_KINDS = ("rotate90", "gaussian_blur", "additive_noise", "compose")
IMAGE_KINDS = ("rotate90", "gaussian_blur", "compose")


@dataclass(frozen=True)
class AugmentPolicy:
    """What the augmented view draws from.

    kind 'compose' picks rotation or blur per sample with equal probability,
    using this policy's own rotation/blur parameters.
    """

    kind: str = "additive_noise"
    turns: tuple[int, ...] = (0, 1, 2, 3)
    sigma_range: tuple[float, float] = (0.5, 1.5)
    ksize: int = 3
    noise_std: float = 0.1

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(
                f"unknown augmentation kind {self.kind!r}, expected one of {POLICY_KINDS}"
            )
        if not self.turns or any(t not in (0, 1, 2, 3) for t in self.turns):
            raise ConfigError(
                f"rotation multiples must be from {{0,1,2,3}}, got {self.turns}"
            )
        lo, hi = self.sigma_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"blur sigma range must satisfy 0 < lo <= hi, got {self.sigma_range}")
        if self.ksize < 1 or self.ksize % 2 == 0:
            raise ConfigError(f"blur kernel size must be odd and >= 1, got {self.ksize}")
        if self.noise_std < 0:
            raise ConfigError(f"noise std must be >= 0, got {self.noise_std}")


def rotate90(img, quarter_turns: int) -> Tensor:
    """Rotate a square image by exact quarter turns (counter-clockwise).

    A pure index permutation: four single turns compose to the identity and
    the multiset of pixel values is preserved exactly.
    """
    img = as_tensor(img)
    if img.ndim < 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"rotate90 requires a square image, got shape {img.shape}")
    if quarter_turns not in (0, 1, 2, 3):
        raise DomainError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    return np.rot90(img, k=quarter_turns, axes=(0, 1)).copy()


def gaussian_kernel1d(sigma: float, ksize: int) -> Tensor:
    """Normalized 1-D Gaussian taps at integer offsets, truncated to ksize."""
    if sigma <= 0:
        raise DomainError(f"blur sigma must be > 0, got {sigma}")
    if ksize < 1 or ksize % 2 == 0:
        raise DomainError(f"blur kernel size must be odd and >= 1, got {ksize}")
    offsets = np.arange(ksize) - ksize // 2
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def gaussian_blur(img, sigma: float, ksize: int) -> Tensor:
    """Separable Gaussian blur with mirrored (edge-including) border handling.

    The mirrored border makes the smoothing operator doubly stochastic for a
    symmetric kernel, so a constant image is a fixed point and the global mean
    is preserved.
    """
    img = as_tensor(img)
    if img.ndim < 2:
        raise ShapeError(f"gaussian_blur expects an image, got shape {img.shape}")
    if ksize > min(img.shape[0], img.shape[1]):
        raise DomainError(
            f"kernel size {ksize} exceeds image extent {img.shape[:2]}"
        )
    kernel = gaussian_kernel1d(sigma, ksize)
    out = convolve1d(img, kernel, axis=0, mode="reflect")
    return convolve1d(out, kernel, axis=1, mode="reflect")


def _augment_one(sample: Tensor, rng: Rng, policy: AugmentPolicy) -> Tensor:
    kind = policy.kind
    if kind == "compose":
        kind = "rotate90" if int(rng.integers(0, 2)) == 0 else "gaussian_blur"
    if kind == "rotate90":
        turn = policy.turns[int(rng.integers(0, len(policy.turns)))]
        return rotate90(sample, turn)
    if kind == "gaussian_blur":
        lo, hi = policy.sigma_range
        sigma = lo if hi == lo else float(rng.uniform(lo, hi))
        return gaussian_blur(sample, sigma, policy.ksize)
    # additive_noise
    if policy.noise_std == 0:
        return sample.copy()
    return sample + policy.noise_std * rng.normal(sample.shape)


def make_view_pair(
    x, rng: Rng, policy: AugmentPolicy, sample_ids=None
) -> tuple[Tensor, Tensor]:
    """(clean view, augmented view) for a batch; never mutates its input.

    The second view applies one independently drawn augmentation per sample.
    Draws come from rng.substream("sample", id); ids default to batch
    positions, but callers iterating a dataset should pass stable dataset
    indices so a sample's augmentation does not depend on who shares its batch.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"expected a batch (n leading axis), got shape {x.shape}")
    if policy.kind in IMAGE_KINDS and x.ndim != 4:
        raise ShapeError(
            f"augmentation kind {policy.kind!r} requires n x h x w x ch input, "
            f"got shape {x.shape}"
        )
    n = x.shape[0]
    if sample_ids is None:
        sample_ids = np.arange(n)
    sample_ids = np.asarray(sample_ids)
    if sample_ids.shape != (n,):
        raise ShapeError(
            f"sample_ids must have length {n}, got shape {sample_ids.shape}"
        )
    view1 = x.copy()
    view2 = np.empty_like(x)
    for i in range(n):
        sub = rng.substream("sample", int(sample_ids[i]))
        view2[i] = _augment_one(x[i], sub, policy)
    return view1, view2
