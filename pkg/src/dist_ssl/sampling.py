"""Frame sampling and strong frame-wise augmentation.

``uniform_sample`` is the deterministic view used for pseudo-labelling and
evaluation; ``random_stratified_sample`` followed by ``strong_augment`` is the
randomised view used for training and for the invariance check.

Augmentation draws one set of parameters per clip and applies it to every
frame. Saturation jitter is accepted for parity with colour pipelines but has
no effect on single-channel frames.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from dist_ssl.errors import ParameterError, ValidationError


@dataclass(frozen=True)
class SamplingParams:
    target_frames: int = 8

    def __post_init__(self):
        if isinstance(self.target_frames, bool) or int(self.target_frames) != self.target_frames \
                or self.target_frames < 1:
            raise ParameterError("target_frames", f"must be a positive integer, got {self.target_frames!r}")


@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = 15.0
    brightness_jitter: float = 0.3
    contrast_jitter: float = 0.3
    saturation_jitter: float = 0.5
    blur_kernel: int = 5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ParameterError("blur_kernel", f"must be odd and >= 1, got {self.blur_kernel}")
        low, high = self.blur_sigma_range
        if not 0 < low <= high:
            raise ParameterError("blur_sigma_range", f"need 0 < low <= high, got {(low, high)}")
        for name in ("max_rotation_deg", "brightness_jitter", "contrast_jitter", "saturation_jitter"):
            if getattr(self, name) < 0:
                raise ParameterError(name, "must be >= 0")
        object.__setattr__(self, "blur_sigma_range", (float(low), float(high)))


@dataclass(frozen=True)
class AugmentDraw:
    """Concrete parameters applied to one clip."""

    angle_deg: float
    brightness: float
    contrast: float
    saturation: float
    sigma: float


def stable_seed(*parts) -> int:
    """63-bit seed from printable parts; unlike ``hash()`` it is stable across processes."""
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _frame_count(frames: np.ndarray) -> int:
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValidationError(f"expected a non-empty (L, H, W) frame array, got shape {frames.shape}")
    return frames.shape[0]


def uniform_indices(length: int, target: int) -> np.ndarray:
    if length < 1:
        raise ValidationError("cannot sample from an empty clip")
    if target == 1:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(target, dtype=np.int64)
    return (i * (length - 1)) // (target - 1)


def stratum_bounds(length: int, target: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(target, dtype=np.int64)
    low = (i * length) // target
    high = ((i + 1) * length) // target
    # short clips: every stratum still owns at least one frame
    return low, np.maximum(high, low + 1)


def stratified_indices(length: int, target: int, rng: np.random.Generator) -> np.ndarray:
    if length < 1:
        raise ValidationError("cannot sample from an empty clip")
    low, high = stratum_bounds(length, target)
    return rng.integers(low, high)


def uniform_sample(frames: np.ndarray, params: SamplingParams) -> np.ndarray:
    return frames[uniform_indices(_frame_count(frames), params.target_frames)]


def random_stratified_sample(frames: np.ndarray, params: SamplingParams, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return frames[stratified_indices(_frame_count(frames), params.target_frames, rng)]


def draw_augment(params: AugmentParams, rng: np.random.Generator) -> AugmentDraw:
    def factor(jitter: float) -> float:
        return float(rng.uniform(max(0.0, 1.0 - jitter), 1.0 + jitter))

    return AugmentDraw(
        angle_deg=float(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)),
        brightness=factor(params.brightness_jitter),
        contrast=factor(params.contrast_jitter),
        saturation=factor(params.saturation_jitter),
        sigma=float(rng.uniform(*params.blur_sigma_range)),
    )


def _gaussian_kernels(sigmas: torch.Tensor, size: int) -> torch.Tensor:
    offsets = torch.arange(size, dtype=torch.float32) - (size - 1) / 2
    k1 = torch.exp(-(offsets[None, :] ** 2) / (2 * sigmas[:, None] ** 2))
    k1 = k1 / k1.sum(dim=1, keepdim=True)
    return k1[:, :, None] * k1[:, None, :]


def apply_augment_batch(clips: torch.Tensor, draws: list[AugmentDraw], blur_kernel: int) -> torch.Tensor:
    """Augment a (B, T, H, W) batch, one draw per clip, shared across its frames."""
    b, t, h, w = clips.shape
    x = clips.float()

    angles = torch.tensor([math.radians(d.angle_deg) for d in draws], dtype=torch.float32)
    if torch.any(angles != 0):
        cos, sin = torch.cos(angles), torch.sin(angles)
        zero = torch.zeros_like(cos)
        theta = torch.stack([torch.stack([cos, -sin, zero], 1), torch.stack([sin, cos, zero], 1)], 1)
        grid = F.affine_grid(theta, (b, t, h, w), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)

    bright = torch.tensor([d.brightness for d in draws], dtype=torch.float32)[:, None, None, None]
    x = (x * bright).clamp(0.0, 1.0)

    contrast = torch.tensor([d.contrast for d in draws], dtype=torch.float32)[:, None, None, None]
    mean = x.mean(dim=(2, 3), keepdim=True)
    x = ((x - mean) * contrast + mean).clamp(0.0, 1.0)

    # saturation: no chroma on single-channel frames

    if blur_kernel > 1:
        sigmas = torch.tensor([d.sigma for d in draws], dtype=torch.float32)
        kernels = _gaussian_kernels(sigmas, blur_kernel)[:, None]
        pad = blur_kernel // 2
        mode = "reflect" if min(h, w) > pad else "replicate"
        frames_first = F.pad(x.permute(1, 0, 2, 3), (pad, pad, pad, pad), mode=mode)
        x = F.conv2d(frames_first, kernels, groups=b).permute(1, 0, 2, 3)
    return x.clamp(0.0, 1.0)


def strong_augment(frames: np.ndarray, params: AugmentParams, seed: int) -> np.ndarray:
    _frame_count(frames)
    draw = draw_augment(params, np.random.default_rng(seed))
    out = apply_augment_batch(torch.from_numpy(np.ascontiguousarray(frames))[None], [draw], params.blur_kernel)
    return out[0].numpy()


def training_view_batch(
    clips: np.ndarray,
    sampling: SamplingParams,
    aug: AugmentParams,
    seeds: list[int],
) -> torch.Tensor:
    """Random stratified sampling then strong augmentation for a stack of clips.

    One generator per clip, seeded from ``seeds``: frame draw first, then the
    augmentation draw.
    """
    views, draws = [], []
    for frames, seed in zip(clips, seeds):
        rng = np.random.default_rng(seed)
        views.append(frames[stratified_indices(frames.shape[0], sampling.target_frames, rng)])
        draws.append(draw_augment(aug, rng))
    batch = torch.from_numpy(np.ascontiguousarray(np.stack(views)))
    return apply_augment_batch(batch, draws, aug.blur_kernel)


def uniform_view_batch(clips: np.ndarray, sampling: SamplingParams) -> torch.Tensor:
    idx = uniform_indices(clips.shape[1], sampling.target_frames)
    return torch.from_numpy(np.ascontiguousarray(clips[:, idx]))


def augmented_counterpart(frames: np.ndarray, sampling: SamplingParams, aug: AugmentParams, seed: int) -> np.ndarray:
    """Single-clip form of :func:`training_view_batch`."""
    return training_view_batch(frames[None], sampling, aug, [seed])[0].numpy()
