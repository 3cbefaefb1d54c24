"""Synthetic SAR-like target chips with exact target/shadow/clutter masks.

Every class is photographed "on its own terrain": the clutter of a class-k chip is
drawn from a log-normal texture owned by class k, so the background alone is a
perfect class cue.  A held-out pool of scene textures supplies clutter the
classifier has never seen.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cfa.texture import ClutterField, lognormal_samples

MAGIC = b"CFA1"
VERSION = 1

CLUTTER, TARGET, SHADOW = 0, 1, 2

# SeedSequence domain tags keep the train, test, scene and layout streams apart.
_TAG_LAYOUT = 0x1A7
_TAG_CHIP = 0xC41
_TAG_SCENE = 0x5CE


class DatasetFormatError(ValueError):
    """Raised when a chip-dataset file is malformed."""


class ShadowParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    length: float = Field(14.0, gt=0, description="extent along the range axis, pixels")
    overlap: float = Field(2.0, ge=0, description="how far the ellipse reaches back under the target")
    width_pad: float = Field(1.0, ge=0, description="added to the target's cross-range half width")
    attenuation: float = Field(0.05, gt=0, lt=1)


def _default_textures(n: int, lo: tuple[float, float], hi: tuple[float, float]) -> list[tuple[float, float]]:
    if n == 1:
        return [lo]
    return [
        (round(lo[0] + (hi[0] - lo[0]) * k / (n - 1), 6), round(lo[1] + (hi[1] - lo[1]) * k / (n - 1), 6))
        for k in range(n)
    ]


class SceneSpec(BaseModel):
    """Everything that determines a synthetic dataset."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_classes: int = Field(4, ge=2)
    chips_per_class_train: int = Field(200, ge=0)
    chips_per_class_test: int = Field(100, ge=0)
    chip_size: int = Field(64, ge=8)
    scatterer_count_range: tuple[int, int] = (6, 12)
    amplitude_range: tuple[float, float] = (0.6, 1.0)
    target_half_length_range: tuple[float, float] = (6.0, 11.0)
    target_half_width_range: tuple[float, float] = (2.5, 5.0)
    aspect_range_deg: tuple[float, float] = (0.0, 360.0)
    psf_sigma: float = Field(1.2, gt=0)
    position_jitter: float = Field(0.3, ge=0)
    center_jitter: float = Field(2.0, ge=0)
    target_threshold: float = Field(0.35, gt=0, lt=1)
    shadow_params: ShadowParams = ShadowParams()
    clutter_texture_per_class: list[tuple[float, float]] | None = None
    scene_pool_textures: list[tuple[float, float]] | None = None
    scene_pool_size: int = Field(32, ge=0)
    master_seed: int = Field(0, ge=0, lt=2**63)

    @model_validator(mode="before")
    @classmethod
    def _fill_textures(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        n = data.get("n_classes", 4)
        if isinstance(n, int) and n >= 1:
            if data.get("clutter_texture_per_class") is None:
                data["clutter_texture_per_class"] = _default_textures(n, (0.05, 0.025), (0.23, 0.08))
            if data.get("scene_pool_textures") is None:
                data["scene_pool_textures"] = _default_textures(max(n - 1, 1), (0.11, 0.06), (0.20, 0.05)) + [
                    (0.28, 0.10)
                ]
        return data

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.scatterer_count_range
        if not 1 <= lo <= hi:
            raise ValueError("scatterer_count_range must satisfy 1 <= lo <= hi")
        a_lo, a_hi = self.amplitude_range
        if not 0 < a_lo <= a_hi <= 1:
            raise ValueError("amplitude_range must lie in (0, 1]")
        for name in ("target_half_length_range", "target_half_width_range", "aspect_range_deg"):
            a, b = getattr(self, name)
            if a > b:
                raise ValueError(f"{name} bounds out of order")
        if len(self.clutter_texture_per_class) != self.n_classes:
            raise ValueError("clutter_texture_per_class needs one (mean, std) pair per class")
        for m, s in list(self.clutter_texture_per_class) + list(self.scene_pool_textures):
            if m <= 0 or s <= 0:
                raise ValueError("texture moments must be positive")
            if m >= self.target_threshold:
                raise ValueError("texture mean must stay below target_threshold")
        train = {tuple(t) for t in self.clutter_texture_per_class}
        if len(train) != self.n_classes:
            raise ValueError("class textures must be distinct")
        if train & {tuple(t) for t in self.scene_pool_textures}:
            raise ValueError("scene_pool_textures must be disjoint from the class textures")
        if self.scene_pool_size > 0 and not self.scene_pool_textures:
            raise ValueError("scene_pool_size > 0 requires scene_pool_textures")
        return self

    def digest(self) -> bytes:
        return hashlib.sha256(self.model_dump_json().encode()).digest()


@dataclass(eq=False)
class MaskSet:
    target: np.ndarray
    shadow: np.ndarray
    clutter: np.ndarray

    @classmethod
    def from_codes(cls, codes: np.ndarray) -> MaskSet:
        return cls(codes == TARGET, codes == SHADOW, codes == CLUTTER)

    def codes(self) -> np.ndarray:
        out = np.zeros(self.target.shape, dtype=np.uint8)
        out[self.target] = TARGET
        out[self.shadow] = SHADOW
        return out

    @property
    def keep(self) -> np.ndarray:
        """Target-or-shadow region, the part every clutter variant preserves."""
        return self.target | self.shadow

    def is_partition(self) -> bool:
        t, s, c = self.target, self.shadow, self.clutter
        disjoint = not (np.any(t & s) or np.any(t & c) or np.any(s & c))
        return disjoint and bool(np.all(t | s | c))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskSet):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("target", "shadow", "clutter")
        )


@dataclass(frozen=True)
class ChipMeta:
    class_id: int
    chip_seed: int
    scr_db: float
    texture_id: int


@dataclass(eq=False)
class Chip:
    image: np.ndarray  # float32, h x w, values in [0, 1]
    masks: MaskSet
    label: int
    meta: ChipMeta

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Chip):
            return NotImplemented
        return (
            self.label == other.label
            and self.meta == other.meta
            and self.masks == other.masks
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
        )


@dataclass(eq=False)
class Dataset:
    train: list[Chip]
    test: list[Chip]
    scene_pool: list[ClutterField]
    spec: SceneSpec

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.train == other.train
            and self.test == other.test
            and self.scene_pool == other.scene_pool
        )


@dataclass(frozen=True)
class _Layout:
    offsets: np.ndarray  # (n, 2) along-track / cross-track canonical positions
    amplitudes: np.ndarray


def scr_db(image: np.ndarray, masks: MaskSet) -> float:
    """Signal-to-clutter ratio of mean target to mean clutter amplitude, 20*log10.

    Stored rounded to float32 so it survives the binary format unchanged.
    """
    if not masks.clutter.any() or not masks.target.any():
        return 0.0
    clutter = float(image[masks.clutter].mean())
    if clutter <= 0:
        return float("inf")
    return float(np.float32(20.0 * np.log10(float(image[masks.target].mean()) / clutter)))


def class_layout(class_id: int, spec: SceneSpec) -> _Layout:
    """Canonical scatterer constellation of a class."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.master_seed, _TAG_LAYOUT, class_id])))
    lo, hi = spec.scatterer_count_range
    # counts spread evenly over the range so classes differ in scatterer number
    n = lo + int(round((hi - lo) * class_id / max(spec.n_classes - 1, 1)))
    half_len = rng.uniform(*spec.target_half_length_range)
    half_wid = rng.uniform(*spec.target_half_width_range)
    offsets = np.stack([rng.uniform(-half_len, half_len, n), rng.uniform(-half_wid, half_wid, n)], axis=1)
    amplitudes = rng.uniform(*spec.amplitude_range, n)
    return _Layout(offsets, amplitudes)


def _footprint_radius(spec: SceneSpec) -> float:
    half_len = spec.target_half_length_range[1]
    half_wid = spec.target_half_width_range[1]
    return float(np.hypot(half_len, half_wid) + 3 * spec.psf_sigma + 3 * spec.position_jitter + spec.center_jitter)


def synth_chip(class_id: int, chip_seed: int, spec: SceneSpec) -> Chip:
    """Render one chip; a pure function of its arguments."""
    if not 0 <= class_id < spec.n_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {spec.n_classes})")
    size = spec.chip_size
    radius = _footprint_radius(spec)
    sp = spec.shadow_params
    half = (size - 1) / 2.0
    if half - radius < 0 or half + radius + sp.length - sp.overlap > size - 1:
        raise ValueError(f"chip_size {size} too small for a target footprint of radius {radius:.1f} plus shadow")

    layout = class_layout(class_id, spec)
    rng = np.random.Generator(np.random.PCG64(chip_seed))
    theta = np.deg2rad(rng.uniform(*spec.aspect_range_deg))
    center = half + rng.uniform(-spec.center_jitter, spec.center_jitter, 2)
    offsets = layout.offsets + rng.normal(0.0, spec.position_jitter, layout.offsets.shape) if spec.position_jitter else layout.offsets
    amps = np.clip(layout.amplitudes * rng.uniform(0.9, 1.1, layout.amplitudes.shape), *spec.amplitude_range)

    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pos = center + offsets @ rot.T  # (n, 2) as (row, col)

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    two_s2 = 2.0 * spec.psf_sigma**2
    field_ = np.zeros((size, size))
    for (r, c), a in zip(pos, amps):
        field_ += a * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / two_s2)
    field_ = np.clip(field_, 0.0, 1.0)
    target = field_ >= spec.target_threshold
    if not target.any():
        raise ValueError("rendered target is empty; lower target_threshold")

    # shadow: ellipse cast away from the sensor along +row (range)
    t_rows, t_cols = np.nonzero(target)
    r_far = t_rows.max()
    c_mid = 0.5 * (t_cols.min() + t_cols.max())
    semi_r = sp.length / 2.0
    semi_c = 0.5 * (t_cols.max() - t_cols.min()) + sp.width_pad
    r_mid = r_far - sp.overlap + semi_r
    ellipse = ((rows - r_mid) / semi_r) ** 2 + ((cols - c_mid) / semi_c) ** 2 <= 1.0
    shadow = ellipse & ~target
    clutter = ~(target | shadow)

    t_mean, t_std = spec.clutter_texture_per_class[class_id]
    background = np.clip(lognormal_samples(t_mean, t_std, (size, size), rng), 0.0, 1.0)
    image = np.where(target, field_, np.where(shadow, background * sp.attenuation, background)).astype(np.float32)

    masks = MaskSet(target, shadow, clutter)
    meta = ChipMeta(class_id=class_id, chip_seed=int(chip_seed), scr_db=scr_db(image, masks), texture_id=class_id)
    return Chip(image=image, masks=masks, label=class_id, meta=meta)


def chip_seed_for(master_seed: int, class_id: int, chip_index: int) -> int:
    """Per-chip 64-bit seed, a hash of (master_seed, class_id, chip_index)."""
    ss = np.random.SeedSequence([master_seed, _TAG_CHIP, class_id, chip_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def synth_scene_field(index: int, spec: SceneSpec) -> ClutterField:
    texture_id = index % len(spec.scene_pool_textures)
    mean, std = spec.scene_pool_textures[texture_id]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.master_seed, _TAG_SCENE, index])))
    size = spec.chip_size
    values = np.clip(lognormal_samples(mean, std, (size, size), rng), 0.0, 1.0).astype(np.float32)
    return ClutterField(values, {"kind": "scene", "texture_id": texture_id})


def _workers() -> int:
    n = int(os.environ.get("CFA_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def synth_dataset(spec: SceneSpec) -> Dataset:
    """Build train/test chips and the held-out scene pool from ``spec.master_seed``.

    Chip index ``i`` of a class is shared by train (``i < n_train``) and test
    (``i >= n_train``) so the two splits are i.i.d. but never overlap.
    """
    n_tr, n_te = spec.chips_per_class_train, spec.chips_per_class_test
    jobs_train = [(k, chip_seed_for(spec.master_seed, k, i)) for k in range(spec.n_classes) for i in range(n_tr)]
    jobs_test = [
        (k, chip_seed_for(spec.master_seed, k, n_tr + i)) for k in range(spec.n_classes) for i in range(n_te)
    ]
    workers = _workers()

    def run(job):
        return synth_chip(job[0], job[1], spec)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            train = list(pool.map(run, jobs_train))
            test = list(pool.map(run, jobs_test))
    else:
        train = [run(j) for j in jobs_train]
        test = [run(j) for j in jobs_test]
    scene = [synth_scene_field(i, spec) for i in range(spec.scene_pool_size)]
    return Dataset(train=train, test=test, scene_pool=scene, spec=spec)


# ---------------------------------------------------------------- binary format

_HEADER = struct.Struct("<HIIIHH32sI")
_CHIP_HEAD = struct.Struct("<HQf")


def _encode(ds: Dataset) -> bytes:
    h = w = ds.spec.chip_size
    spec_json = ds.spec.model_dump_json().encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(
        _HEADER.pack(
            ds.spec.n_classes, len(ds.train), len(ds.test), len(ds.scene_pool), h, w, ds.spec.digest(), len(spec_json)
        )
    )
    buf.write(spec_json)
    for chip in ds.train + ds.test:
        if chip.image.shape != (h, w):
            raise ValueError("chip dimensions disagree with the dataset spec")
        buf.write(_CHIP_HEAD.pack(chip.label, chip.meta.chip_seed, chip.meta.scr_db))
        buf.write(chip.image.astype("<f4", copy=False).tobytes())
        buf.write(chip.masks.codes().tobytes())
    for fld in ds.scene_pool:
        buf.write(struct.pack("<H", int(fld.source.get("texture_id", 0))))
        buf.write(fld.values.astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def write_dataset(ds: Dataset, path) -> None:
    data = _encode(ds)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError("truncated record")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise DatasetFormatError("bad magic number, not a CFA1 dataset")
    (version,) = struct.unpack("<H", r.take(2))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    n_classes, n_train, n_test, n_scene, h, w, digest, spec_len = _HEADER.unpack(r.take(_HEADER.size))
    try:
        spec = SceneSpec.model_validate(json.loads(r.take(spec_len)))
    except (ValueError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"corrupt spec block: {exc}") from exc
    if spec.digest() != digest:
        raise DatasetFormatError("spec digest mismatch")
    if spec.n_classes != n_classes or spec.chip_size != h or h != w:
        raise DatasetFormatError("header disagrees with the embedded spec")

    npix = h * w
    chips = []
    for _ in range(n_train + n_test):
        label, seed, scr = _CHIP_HEAD.unpack(r.take(_CHIP_HEAD.size))
        if label >= n_classes:
            raise DatasetFormatError(f"label {label} out of range")
        image = np.frombuffer(r.take(4 * npix), dtype="<f4").astype(np.float32).reshape(h, w)
        codes = np.frombuffer(r.take(npix), dtype=np.uint8).reshape(h, w)
        if codes.max(initial=0) > SHADOW:
            raise DatasetFormatError("invalid mask code")
        meta = ChipMeta(class_id=label, chip_seed=seed, scr_db=float(scr), texture_id=label)
        chips.append(Chip(image=image, masks=MaskSet.from_codes(codes), label=label, meta=meta))
    scene = []
    for _ in range(n_scene):
        (tid,) = struct.unpack("<H", r.take(2))
        values = np.frombuffer(r.take(4 * npix), dtype="<f4").astype(np.float32).reshape(h, w)
        scene.append(ClutterField(values, {"kind": "scene", "texture_id": tid}))
    if r.pos != len(r.data):
        raise DatasetFormatError("trailing bytes after the last record")
    return Dataset(train=chips[:n_train], test=chips[n_train:], scene_pool=scene, spec=spec)


def stack(chips: list[Chip]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images (n, h, w) float32, mask codes (n, h, w) uint8 and labels (n,) int64."""
    if not chips:
        raise ValueError("no chips to stack")
    images = np.stack([c.image for c in chips])
    codes = np.stack([c.masks.codes() for c in chips])
    labels = np.array([c.label for c in chips], dtype=np.int64)
    return images, codes, labels
