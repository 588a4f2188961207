"""
Sparse kernel used by every weighting step of the mapper.

The same compactly supported kernel serves three roles: the spatial kernel
that spreads label evidence (``l_s``, ``sigma_s``), the per-class flow kernel
(``l1``, ``sigma1``) and the pooled flow kernel for free and static classes
(``l_free``, ``sigma_free``). Each role keeps its own length and scale so the
two flow kernels can be detuned independently.

All functions accept scalars or numpy arrays of points of shape (..., 3).
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class KernelParams:
    """Lengths (meters) and scales of the three kernel roles."""
    l_s: float = 0.15
    sigma_s: float = 0.2
    l1: float = 0.2
    sigma1: float = 50.0
    l_free: Optional[float] = None
    sigma_free: Optional[float] = None

    def __post_init__(self):
        if self.l_free is None:
            object.__setattr__(self, 'l_free', self.l1)
        if self.sigma_free is None:
            object.__setattr__(self, 'sigma_free', self.sigma1)
        for name in ('l_s', 'sigma_s', 'l1', 'sigma1', 'l_free', 'sigma_free'):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"kernel parameter {name} must be positive, got {value}")
            object.__setattr__(self, name, value)

    @property
    def flow_support(self):
        """Largest distance at which a flow kernel is non-zero."""
        return max(self.l1, self.l_free)

    def scaled(self, factor):
        """Copy with every kernel scale multiplied by ``factor``."""
        return KernelParams(
            l_s=self.l_s, sigma_s=self.sigma_s * factor,
            l1=self.l1, sigma1=self.sigma1 * factor,
            l_free=self.l_free, sigma_free=self.sigma_free * factor,
        )


def sparse_kernel(d, l, sigma):
    """
    Evaluate the sparse kernel at distance ``d``.

    sigma * [(2 + cos(2 pi d / l)) (1 - d / l) / 3 + sin(2 pi d / l) / (2 pi)] for d < l, else 0.

    Args:
        d: non-negative distance(s) in meters
        l: kernel length (support radius), > 0
        sigma: kernel scale, > 0

    Returns:
        float for scalar input, otherwise an ndarray shaped like ``d``
    """
    if l <= 0 or sigma <= 0:
        raise ValueError(f"kernel length and scale must be positive (l={l}, sigma={sigma})")
    dist = np.asarray(d, dtype=np.float64)
    if np.any(dist < 0) or np.any(np.isnan(dist)):
        raise ValueError('kernel distance must be non-negative')
    r = np.minimum(dist / l, 1.0)
    angle = TWO_PI * r
    value = sigma * ((2.0 + np.cos(angle)) * (1.0 - r) / 3.0 + np.sin(angle) / TWO_PI)
    # the formula rounds to about -1e-17 next to the support edge
    value = np.where(dist < l, np.maximum(value, 0.0), 0.0)
    if value.ndim == 0:
        return float(value)
    return value


def _distance(x, x_j):
    diff = np.asarray(x, dtype=np.float64) - np.asarray(x_j, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise ValueError('kernel inputs must be finite')
    return np.sqrt(np.sum(diff * diff, axis=-1))


def spatial_weight(x, x_j, params):
    """Weight of a labelled point at ``x`` on the voxel centred at ``x_j``."""
    return sparse_kernel(_distance(x, x_j), params.l_s, params.sigma_s)


def flow_weight(x, x_j, params):
    """Per-class flow kernel (backward correction)."""
    return sparse_kernel(_distance(x, x_j), params.l1, params.sigma1)


def flow_weight_free(x, x_j, params):
    """Pooled flow kernel for free and static classes (forward correction)."""
    return sparse_kernel(_distance(x, x_j), params.l_free, params.sigma_free)
