"""Training objective terms and evaluation metrics.

Images are ``H x W x C`` tensors (``ImageBuffer`` is accepted wherever an
image is expected). Every term returns a 0-d tensor so it can be
backpropagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Sequence, Tuple, Union

import cv2
import torch
import torch.nn.functional as F

from pir.core.errors import NonFiniteLossError, ScaleMatchError, ShapeMismatchError
from pir.core.image import ImageBuffer
from pir.core.rng import Rng
from pir.render.geometry import SdfScene, sdf_gradient

ImageLike = Union[torch.Tensor, ImageBuffer]

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ROUGHNESS_CEILING = 0.5
_BINOMIAL = (1.0, 4.0, 6.0, 4.0, 1.0)


def _as_tensor(image: ImageLike) -> torch.Tensor:
    if isinstance(image, ImageBuffer):
        return image.as_tensor(torch.float64)
    return image


def _check_pair(pred: ImageLike, ref: ImageLike) -> Tuple[torch.Tensor, torch.Tensor]:
    a, b = _as_tensor(pred), _as_tensor(ref)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b.to(a.dtype)


def _to_nchw(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 2:
        image = image[..., None]
    return image.permute(2, 0, 1)[None]


# image terms

def mse(pred: ImageLike, ref: ImageLike) -> torch.Tensor:
    a, b = _check_pair(pred, ref)
    return ((a - b) ** 2).mean()


def psnr(pred: ImageLike, ref: ImageLike) -> float:
    """Peak 1.0; identical images are capped at 99 dB."""
    error = float(mse(pred, ref))
    if error <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(error))


def pyramid_down(image: torch.Tensor) -> torch.Tensor:
    """One Gaussian pyramid step on ``N x C x H x W``: 5-tap binomial, reflect border, stride 2."""
    taps = torch.tensor(_BINOMIAL, dtype=image.dtype) / 16.0
    kernel = (taps[:, None] * taps[None, :])[None, None].repeat(image.shape[1], 1, 1, 1)
    padded = F.pad(image, (2, 2, 2, 2), mode="reflect")
    return F.conv2d(padded, kernel, stride=2, groups=image.shape[1])


def gaussian_pyramid(image: torch.Tensor, levels: int) -> Sequence[torch.Tensor]:
    current = _to_nchw(image)
    pyramid = [current]
    for _ in range(levels - 1):
        if min(current.shape[-2:]) < 3:
            break
        current = pyramid_down(current)
        pyramid.append(current)
    return pyramid


def pyramid_l2(pred: ImageLike, ref: ImageLike, levels: int = 4) -> torch.Tensor:
    """Mean over pyramid levels of the per-level mean squared error."""
    if levels < 1:
        raise ValueError("pyramid_l2 needs levels >= 1")
    a, b = _check_pair(pred, ref)
    pyr_a = gaussian_pyramid(a, levels)
    pyr_b = gaussian_pyramid(b, levels)
    terms = [((la - lb) ** 2).mean() for la, lb in zip(pyr_a, pyr_b)]
    return torch.stack(terms).mean()


def _ssim_window(size: int, dtype: torch.dtype) -> torch.Tensor:
    taps = torch.from_numpy(cv2.getGaussianKernel(size, SSIM_SIGMA).reshape(-1)).to(dtype)
    return taps[:, None] * taps[None, :]


def ssim(pred: ImageLike, ref: ImageLike) -> torch.Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), dynamic range 1."""
    a, b = _check_pair(pred, ref)
    x, y = _to_nchw(a), _to_nchw(b)
    size = min(SSIM_WINDOW, x.shape[-2], x.shape[-1])
    size -= 1 - size % 2
    window = _ssim_window(size, x.dtype)[None, None].repeat(x.shape[1], 1, 1, 1)

    def blur(img: torch.Tensor) -> torch.Tensor:
        return F.conv2d(img, window, groups=x.shape[1])

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    index = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return index.mean()


def ssim_loss(pred: ImageLike, ref: ImageLike) -> torch.Tensor:
    return 1.0 - ssim(pred, ref)


# regularisers

def eikonal_from_gradients(gradients: torch.Tensor) -> torch.Tensor:
    return ((torch.linalg.vector_norm(gradients, dim=-1) - 1.0) ** 2).mean()


def eikonal_loss(scene: SdfScene, points: torch.Tensor) -> torch.Tensor:
    if points.numel() == 0:
        raise ValueError("eikonal_loss needs at least one sample point")
    return eikonal_from_gradients(sdf_gradient(scene, points, create_graph=True))


def roughness_range_loss(roughness: torch.Tensor) -> torch.Tensor:
    """One-sided hinge: ``mean(max(r - 0.5, 0)^2)``."""
    return (torch.relu(roughness - ROUGHNESS_CEILING) ** 2).mean()


def smoothness_loss(
    fields: Sequence[Callable[[torch.Tensor], torch.Tensor]],
    points: torch.Tensor,
    rng: Rng,
    std: float = 0.01,
) -> torch.Tensor:
    """Sum over fields of ``mean |m(x) - m(x + eps)|_1``, ``eps ~ N(0, std^2)`` per axis."""
    if points.numel() == 0:
        raise ValueError("smoothness_loss needs at least one surface point")
    eps = rng.normal(points.shape, std=std, dtype=points.dtype)
    total = torch.zeros((), dtype=points.dtype)
    for fn in fields:
        total = total + (fn(points) - fn(points + eps)).abs().sum(dim=-1).mean()
    return total


def feature_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared feature residual norm."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"feature shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target.to(pred.dtype)) ** 2).sum(dim=-1).mean()


# weighting

@dataclass(frozen=True)
class LossWeights:
    eikonal: float = 1e-4
    roughness_range: float = 0.1
    smoothness: float = 1e-5
    dino: float = 1e-5

    def __post_init__(self) -> None:
        for name, value in self.as_dict().items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight '{name}' must be finite and nonnegative, got {value}")

    def as_dict(self) -> Dict[str, float]:
        return {
            "eikonal": self.eikonal,
            "roughness_range": self.roughness_range,
            "smoothness": self.smoothness,
            "dino": self.dino,
        }

    @classmethod
    def from_config(cls, loss: Mapping[str, float]) -> "LossWeights":
        return cls(
            eikonal=float(loss["eikonal"]),
            roughness_range=float(loss["roughness_range"]),
            smoothness=float(loss["smoothness"]),
            dino=float(loss["dino"]),
        )


UNWEIGHTED_TERMS = ("rgb", "ssim")


@dataclass
class LossReport:
    total: torch.Tensor
    values: Dict[str, float] = field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        payload = dict(self.values)
        payload["total"] = float(self.total.detach())
        return payload


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights) -> LossReport:
    """``rgb + ssim + sum_i lambda_i term_i``; absent terms count as zero."""
    factors = weights.as_dict()
    total = None
    values: Dict[str, float] = {}
    for name, value in terms.items():
        if name not in UNWEIGHTED_TERMS and name not in factors:
            raise KeyError(f"unknown loss term '{name}'")
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
        values[name] = scalar
        weighted = value if name in UNWEIGHTED_TERMS else factors[name] * value
        total = weighted if total is None else total + weighted
    if total is None:
        total = torch.zeros(())
    return LossReport(total=total, values=values)


# albedo evaluation

def albedo_scale_match(pred: ImageLike, ref: ImageLike) -> Tuple[float, torch.Tensor]:
    """Scalar ``c = <pred, ref> / <pred, pred>`` jointly over RGB, and ``c * pred``."""
    a, b = _check_pair(pred, ref)
    a64, b64 = a.to(torch.float64), b.to(torch.float64)
    denom = float((a64 * a64).sum())
    if denom <= 0.0:
        raise ScaleMatchError("predicted albedo is identically zero; no scale can match it")
    scale = float((a64 * b64).sum()) / denom
    return scale, a64 * scale
