"""Clutter variants: mixed blank/log-normal references for training, plus the
evaluation-time perturbations (clutter replacement and SCR scaling).

All functions are pure given an explicitly passed ``numpy.random.Generator``.
Target and shadow pixels are copied, never recomputed, so they stay bit-equal
to the input chip.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cfa.chipforge import Chip, scr_db
from cfa.texture import ClutterField, lognormal_params, lognormal_samples

__all__ = [
    "ClutterField",
    "VariantPolicy",
    "lognormal_params",
    "sample_lognormal_field",
    "draw_variant_field",
    "make_variant",
    "make_variant_batch",
    "replace_clutter",
    "scale_scr",
    "scr_factor",
]


class VariantPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    p: float = Field(0.8, ge=0.0, le=1.0)
    n_m_range: tuple[float, float] = (0.1, 0.2)
    n_sigma_range: tuple[float, float] = (0.1, 0.3)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("n_m_range", "n_sigma_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        return self


def sample_lognormal_field(n_m: float, n_sigma: float, shape, rng: np.random.Generator) -> ClutterField:
    """i.i.d. log-normal amplitudes with sample mean ``n_m`` and std ``n_sigma``, clipped to [0, 1]."""
    values = np.clip(lognormal_samples(n_m, n_sigma, shape, rng), 0.0, 1.0).astype(np.float32)
    return ClutterField(values, {"kind": "lognormal", "n_m": float(n_m), "n_sigma": float(n_sigma)})


def draw_variant_field(shape, policy: VariantPolicy, rng: np.random.Generator) -> ClutterField:
    """Noise field with probability ``p`` (moments drawn from the policy ranges), else blank."""
    if rng.random() < policy.p:
        n_m = rng.uniform(*policy.n_m_range)
        n_sigma = rng.uniform(*policy.n_sigma_range)
        return sample_lognormal_field(n_m, n_sigma, shape, rng)
    return ClutterField(np.zeros(shape, dtype=np.float32), {"kind": "blank"})


def replace_clutter(chip: Chip, field: ClutterField) -> Chip:
    if field.values.shape != chip.image.shape:
        raise ValueError(f"field shape {field.values.shape} != chip shape {chip.image.shape}")
    image = np.where(chip.masks.clutter, field.values.astype(np.float32), chip.image)
    meta = dataclasses.replace(chip.meta, scr_db=scr_db(image, chip.masks))
    return dataclasses.replace(chip, image=image, meta=meta)


def make_variant(chip: Chip, policy: VariantPolicy, rng: np.random.Generator) -> Chip:
    return replace_clutter(chip, draw_variant_field(chip.image.shape, policy, rng))


def make_variant_batch(
    images: np.ndarray, clutter: np.ndarray, policy: VariantPolicy, rng: np.random.Generator
) -> np.ndarray:
    """Array form of :func:`make_variant` for a batch; ``clutter`` is the boolean clutter mask stack.

    Consumes ``rng`` in the same order as calling :func:`make_variant` chip by chip.
    """
    out = np.empty_like(images)
    for i in range(len(images)):
        field = draw_variant_field(images.shape[1:], policy, rng)
        out[i] = np.where(clutter[i], field.values, images[i])
    return out


def scr_factor(delta_db: float) -> float:
    """Clutter amplitude multiplier that raises the SCR by ``delta_db`` (amplitude dB)."""
    return float(10.0 ** (-delta_db / 20.0))


def scale_scr(chip: Chip, delta_db: float) -> Chip:
    if not np.isfinite(delta_db):
        raise ValueError("delta_db must be finite")
    if delta_db == 0:
        return chip
    scaled = np.clip(chip.image.astype(np.float64) * scr_factor(delta_db), 0.0, 1.0).astype(np.float32)
    image = np.where(chip.masks.clutter, scaled, chip.image)
    meta = dataclasses.replace(chip.meta, scr_db=float(np.float32(chip.meta.scr_db + delta_db)))
    return dataclasses.replace(chip, image=image, meta=meta)
