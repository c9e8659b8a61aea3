"""
Local estimators producing the initial estimate from the observed scores
"""
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.ndimage import convolve1d

from numerics_core import ArityMismatchError, Field, InvalidArgumentError


@dataclass(frozen=True)
class MovingAverage:
    """Trailing window of `taps` samples, truncated and renormalised at the left edge"""
    taps: int = 10

    arity = 1

    def __post_init__(self):
        if self.taps < 1:
            raise InvalidArgumentError(f"Moving average needs at least one tap, got {self.taps}")


@dataclass(frozen=True)
class GaussianBlur:
    """Separable Gaussian kernel; stddev and radius are in grid-index units"""
    stddev: float = 5.0
    truncation_radius: Optional[int] = None

    arity = 2

    def __post_init__(self):
        if not self.stddev > 0:
            raise InvalidArgumentError(f"Gaussian stddev must be positive, got {self.stddev}")
        if self.truncation_radius is not None and self.truncation_radius < 1:
            raise InvalidArgumentError(f"Truncation radius must be positive, got {self.truncation_radius}")

    @property
    def radius(self) -> int:
        if self.truncation_radius is not None:
            return int(self.truncation_radius)
        return int(math.ceil(4.0 * self.stddev))

    def kernel(self) -> np.ndarray:
        offsets = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        weights = np.exp(-offsets ** 2 / (2.0 * self.stddev ** 2))
        return weights / weights.sum()


SmootherSpec = Union[MovingAverage, GaussianBlur]


def moving_average(values: np.ndarray, taps: int) -> np.ndarray:
    n = values.size
    sums = np.convolve(values, np.ones(taps))[:n]
    counts = np.minimum(np.arange(1, n + 1), taps)
    return sums / counts


def gaussian_blur(image: np.ndarray, spec: GaussianBlur) -> np.ndarray:
    kernel = spec.kernel()
    blurred = image
    coverage = np.ones_like(image)
    for axis in (0, 1):
        blurred = convolve1d(blurred, kernel, axis=axis, mode='constant', cval=0.0)
        coverage = convolve1d(coverage, kernel, axis=axis, mode='constant', cval=0.0)
    # dividing by the in-grid kernel mass renormalises the weights at the borders
    return blurred / coverage


def smooth(y: Field, spec: SmootherSpec) -> Field:
    if spec.arity != y.grid.ndim:
        raise ArityMismatchError(f"{type(spec).__name__} applies to {spec.arity}D fields, got a {y.grid.ndim}D field")
    if isinstance(spec, MovingAverage):
        return y.with_values(moving_average(y.values, spec.taps))
    return y.with_values(gaussian_blur(y.image, spec).ravel())
