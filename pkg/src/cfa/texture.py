"""Log-normal clutter textures shared by the chip generator and the variant generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """Return ``(mu, sigma)`` of the underlying normal for a log-normal with the
    given sample mean and standard deviation."""
    if mean <= 0 or std <= 0:
        raise ValueError(f"log-normal moments must be positive, got mean={mean}, std={std}")
    var_ratio = (std * std) / (mean * mean)
    mu = float(np.log(mean * mean / np.sqrt(mean * mean + std * std)))
    sigma = float(np.sqrt(np.log1p(var_ratio)))
    return mu, sigma


def lognormal_samples(mean: float, std: float, size, rng: np.random.Generator) -> np.ndarray:
    """Unclipped float64 log-normal draws with the requested sample moments."""
    mu, sigma = lognormal_params(mean, std)
    return rng.lognormal(mu, sigma, size=size)


@dataclass(eq=False)
class ClutterField:
    """An amplitude grid that can fill the clutter region of a chip.

    ``source`` records provenance, e.g. ``{"kind": "lognormal", "n_m": .15, "n_sigma": .2}``,
    ``{"kind": "blank"}`` or ``{"kind": "scene", "texture_id": 3, "offset": (4, 9)}``.
    """

    values: np.ndarray
    source: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClutterField):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.values, other.values)
