"""Measurement battery: robustness under clutter interference, region Shapley
attribution, layer-wise feature similarity, guided-backprop saliency and the
lambda/p ablation sweep."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from cfa.chipforge import Chip, Dataset, stack
from cfa.tinynet import TinyNet, forward, input_gradient, predict_batch
from cfa.variantgen import ClutterField, replace_clutter, sample_lognormal_field, scale_scr

CONDITIONS = ("blank", "noise", "scene_clutter", "scr+3dB", "scr-3dB")
RANDOM_CONDITIONS = {"noise", "scene_clutter"}
NOISE_MEAN, NOISE_STD = 0.15, 0.2
PLAYERS = ("target", "shadow", "clutter")


# ---------------------------------------------------------------- perturbations


def _chip_rng(seed: int, tag: str, run: int, chip: Chip) -> np.random.Generator:
    # keyed on the chip's own seed so results do not depend on test-set order
    tag_code = int.from_bytes(tag.encode()[:8].ljust(8, b"\0"), "little")
    ss = np.random.SeedSequence([seed, tag_code, run, chip.meta.chip_seed, chip.label])
    return np.random.Generator(np.random.PCG64(ss))


def scene_crop(dataset: Dataset, rng: np.random.Generator) -> ClutterField:
    """A random scene-pool field, cyclically shifted by a random offset."""
    if not dataset.scene_pool:
        raise ValueError("dataset has an empty scene pool")
    src = dataset.scene_pool[int(rng.integers(len(dataset.scene_pool)))]
    h, w = src.values.shape
    offset = (int(rng.integers(h)), int(rng.integers(w)))
    values = np.roll(src.values, offset, axis=(0, 1))
    return ClutterField(values, {"kind": "scene", "texture_id": src.source.get("texture_id"), "offset": offset})


def perturb(chip: Chip, condition: str, dataset: Dataset, rng: np.random.Generator | None = None) -> Chip:
    if condition == "identity":
        return chip
    if condition == "blank":
        return replace_clutter(chip, ClutterField(np.zeros_like(chip.image), {"kind": "blank"}))
    if condition == "noise":
        return replace_clutter(chip, sample_lognormal_field(NOISE_MEAN, NOISE_STD, chip.image.shape, rng))
    if condition == "scene_clutter":
        return replace_clutter(chip, scene_crop(dataset, rng))
    if condition == "scr+3dB":
        return scale_scr(chip, 3.0)
    if condition == "scr-3dB":
        return scale_scr(chip, -3.0)
    raise ValueError(f"unknown condition {condition!r}")


def perturb_all(chips: Sequence[Chip], condition: str, dataset: Dataset, seed: int, run: int) -> list[Chip]:
    if condition in RANDOM_CONDITIONS:
        return [perturb(c, condition, dataset, _chip_rng(seed, condition, run, c)) for c in chips]
    return [perturb(c, condition, dataset) for c in chips]


# ---------------------------------------------------------------- accuracy


def accuracy(model: TinyNet, chips: Sequence[Chip]) -> float:
    if not chips:
        raise ValueError("accuracy of an empty chip list")
    images, _, labels = stack(list(chips))
    return float(np.sum(predict_batch(model, images).argmax(1) == labels) * 100.0 / len(labels))


@dataclass
class RobustnessRow:
    condition: str
    accuracy_clean: float
    accuracy_perturbed: float
    decrease: float
    runs: int
    per_run: list[float] = field(default_factory=list)


def robustness_suite(
    model: TinyNet,
    dataset: Dataset,
    runs: int = 10,
    seed: int = 0,
    conditions: Iterable[str] = CONDITIONS,
) -> list[RobustnessRow]:
    """Accuracy decrease per interference condition; random conditions average ``runs`` draws."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    clean = accuracy(model, dataset.test)
    rows = []
    for cond in conditions:
        if cond not in CONDITIONS:
            raise ValueError(f"unknown condition {cond!r}")
        if cond in RANDOM_CONDITIONS:
            if cond == "scene_clutter" and not dataset.scene_pool:
                raise ValueError("scene_clutter needs a nonempty scene pool")
            per_run = [accuracy(model, perturb_all(dataset.test, cond, dataset, seed, r)) for r in range(runs)]
        else:
            per_run = [accuracy(model, perturb_all(dataset.test, cond, dataset, seed, 0))] * runs
        mean = math.fsum(per_run) / len(per_run)
        rows.append(RobustnessRow(cond, clean, mean, clean - mean, runs, per_run))
    return rows


# ---------------------------------------------------------------- Shapley


def shapley_values(value: Callable[[frozenset], float], players: Sequence = PLAYERS) -> dict:
    """Exact Shapley values by coalition enumeration.

    phi_i = sum over S not containing i of |S|!(n-|S|-1)!/n! * (v(S+i) - v(S)).
    """
    n = len(players)
    cache = {}

    def v(s):
        if s not in cache:
            cache[s] = float(value(s))
        return cache[s]

    out = {}
    for p in players:
        others = [q for q in players if q != p]
        total = 0.0
        for k in range(n):
            weight = math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
            for combo in itertools.combinations(others, k):
                s = frozenset(combo)
                total += weight * (v(s | {p}) - v(s))
        out[p] = total
    return out


@dataclass
class ShapleyTriple:
    phi_target: float
    phi_shadow: float
    phi_clutter: float
    v_full: float
    v_empty: float

    @property
    def total(self) -> float:
        return self.phi_target + self.phi_shadow + self.phi_clutter


COALITIONS = [frozenset(c) for k in range(4) for c in itertools.combinations(PLAYERS, k)]


def _coalition_images(chip: Chip) -> np.ndarray:
    regions = {"target": chip.masks.target, "shadow": chip.masks.shadow, "clutter": chip.masks.clutter}
    out = np.zeros((len(COALITIONS),) + chip.image.shape, dtype=np.float32)
    for i, s in enumerate(COALITIONS):
        keep = np.zeros(chip.image.shape, dtype=bool)
        for p in s:
            keep |= regions[p]
        out[i] = np.where(keep, chip.image, 0.0)
    return out


def _triple_from_values(values: dict) -> ShapleyTriple:
    phi = shapley_values(lambda s: values[s])
    return ShapleyTriple(
        phi["target"] * 100.0,
        phi["shadow"] * 100.0,
        phi["clutter"] * 100.0,
        values[frozenset(PLAYERS)] * 100.0,
        values[frozenset()] * 100.0,
    )


def shapley_regions(model: TinyNet, chip: Chip) -> ShapleyTriple:
    """Shapley split of the true-class softmax probability over target, shadow and clutter.

    Regions outside a coalition are zero-filled.  Values are in percent.
    """
    return shapley_batch(model, [chip])[0]


def shapley_batch(model: TinyNet, chips: Sequence[Chip], batch_chips: int = 32) -> list[ShapleyTriple]:
    out = []
    for start in range(0, len(chips), batch_chips):
        group = chips[start : start + batch_chips]
        images = np.concatenate([_coalition_images(c) for c in group])
        probs = torch.softmax(torch.as_tensor(predict_batch(model, images)), 1).numpy()
        probs = probs.reshape(len(group), len(COALITIONS), -1)
        for chip, p in zip(group, probs):
            out.append(_triple_from_values({s: float(p[i, chip.label]) for i, s in enumerate(COALITIONS)}))
    return out


def mean_triple(triples: Sequence[ShapleyTriple]) -> ShapleyTriple:
    n = len(triples)
    if n == 0:
        raise ValueError("no triples to average")
    keys = ("phi_target", "phi_shadow", "phi_clutter", "v_full", "v_empty")
    return ShapleyTriple(*(math.fsum(getattr(t, k) for t in triples) / n for k in keys))


# ---------------------------------------------------------------- feature similarity


@dataclass
class SimilarityCurve:
    hooks: list[str]
    values: list[float]
    runs: int


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; a zero row gives 0."""
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", a, b)
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def _hook_features(model: TinyNet, images: np.ndarray, batch_size: int = 128) -> dict[str, np.ndarray]:
    acc: dict[str, list] = {}
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            feats = forward(model, images[i : i + batch_size]).features
            for k, v in feats.items():
                acc.setdefault(k, []).append(v.double().numpy())
    return {k: np.concatenate(v) for k, v in acc.items()}


def layer_cosine(
    model: TinyNet, dataset: Dataset, perturbation: str = "scene_clutter", runs: int = 10, seed: int = 0
) -> SimilarityCurve:
    """Mean over test chips (then runs) of cos(f(x), f(x*)) at every hook."""
    allowed = {"identity", "scene_clutter", "blank", "noise", "scr+3dB", "scr-3dB"}
    if perturbation not in allowed:
        raise ValueError(f"unsupported perturbation {perturbation!r}")
    images, _, _ = stack(dataset.test)
    base = _hook_features(model, images)
    hooks = list(model.arch.hook_names)
    n_runs = runs if perturbation in RANDOM_CONDITIONS else 1
    per_run = []
    for r in range(n_runs):
        pert, _, _ = stack(perturb_all(dataset.test, perturbation, dataset, seed, r))
        other = _hook_features(model, pert)
        per_run.append([float(np.mean(cosine_rows(base[h], other[h]))) for h in hooks])
    values = [math.fsum(run[i] for run in per_run) / n_runs for i in range(len(hooks))]
    return SimilarityCurve(hooks, values, runs)


# ---------------------------------------------------------------- guided backprop


def guided_backprop(model: TinyNet, chip_or_image, guided: bool = True) -> np.ndarray:
    """Input gradient of the top logit with ReLU backward passes gated to positive signals."""
    image = chip_or_image.image if isinstance(chip_or_image, Chip) else np.asarray(chip_or_image)

    def top_logit(stack_):
        logits = stack_.logits
        return logits[0, int(logits[0].argmax())]

    return input_gradient(model, image[None], top_logit, guided=guided)[0]


def normalize_saliency(saliency: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(saliency)))
    return np.abs(saliency) / peak if peak > 0 else np.zeros_like(saliency)


def saliency_mass_fraction(saliency: np.ndarray, region: np.ndarray) -> float:
    mass = np.abs(saliency)
    total = float(mass.sum())
    return float(mass[region].sum()) / total if total > 0 else 0.0


def mean_saliency_fraction(
    model: TinyNet, dataset: Dataset, condition: str = "scene_clutter", seed: int = 0, limit: int | None = None
) -> float:
    """Average share of guided-backprop mass on target-or-shadow over perturbed test chips."""
    chips = dataset.test[:limit] if limit else dataset.test
    pert = perturb_all(chips, condition, dataset, seed, 0)
    fracs = [saliency_mass_fraction(guided_backprop(model, c), c.masks.keep) for c in pert]
    return math.fsum(fracs) / len(fracs)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationPoint:
    sweep: str
    lam: float
    p: float
    clean: float
    scene: float
    decrease: float


def ablation_sweep(
    dataset: Dataset,
    baseline: TinyNet,
    lambdas: Sequence[float],
    ps: Sequence[float],
    config,
    runs: int = 10,
    seed: int = 0,
    mode: str = "curves",
    lambda_sweep_p: float = 0.5,
    p_sweep_lambda: float = 1.0,
) -> list[AblationPoint]:
    """Train one CFA model per point from the same baseline; report clean and scene-clutter accuracy.

    ``mode="curves"`` sweeps lambda at ``p = lambda_sweep_p`` and p at
    ``lambda = p_sweep_lambda``; ``mode="grid"`` evaluates every (lambda, p) pair.
    """
    from cfa.trainer import train_cfa

    if not lambdas or not ps:
        raise ValueError("ablation grids must be nonempty")
    if mode == "curves":
        points = [("lambda", lam, lambda_sweep_p) for lam in lambdas] + [("p", p_sweep_lambda, p) for p in ps]
    elif mode == "grid":
        points = [("grid", lam, p) for lam in lambdas for p in ps]
    else:
        raise ValueError(f"unknown sweep mode {mode!r}")
    out = []
    for sweep, lam, p in points:
        cfg = config.model_copy(
            update={"lam": float(lam), "variant_policy": config.variant_policy.model_copy(update={"p": float(p)})}
        )
        model, _ = train_cfa(baseline, dataset, cfg)
        (row,) = robustness_suite(model, dataset, runs=runs, seed=seed, conditions=("scene_clutter",))
        out.append(AblationPoint(sweep, float(lam), float(p), row.accuracy_clean, row.accuracy_perturbed, row.decrease))
    return out


# ---------------------------------------------------------------- emission


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_robustness_csv(path, rows_by_model: dict[str, list[RobustnessRow]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "condition", "accuracy_clean", "accuracy_perturbed", "decrease", "runs", "per_run"])
        for name, rows in rows_by_model.items():
            for r in rows:
                w.writerow(
                    [name, r.condition, _fmt(r.accuracy_clean), _fmt(r.accuracy_perturbed), _fmt(r.decrease), r.runs,
                     " ".join(_fmt(v) for v in r.per_run)]
                )


def write_shapley_csv(path, triples_by_model: dict[str, ShapleyTriple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "phi_target", "phi_shadow", "phi_clutter", "v_full", "v_empty"])
        for name, t in triples_by_model.items():
            w.writerow([name, _fmt(t.phi_target), _fmt(t.phi_shadow), _fmt(t.phi_clutter), _fmt(t.v_full), _fmt(t.v_empty)])


def write_cosine_csv(path, curves_by_model: dict[str, SimilarityCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "hook", "cosine", "runs"])
        for name, c in curves_by_model.items():
            for h, v in zip(c.hooks, c.values):
                w.writerow([name, h, _fmt(v), c.runs])


def write_ablation_csv(path, points: Sequence[AblationPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "lambda", "p", "clean", "scene_clutter", "decrease"])
        for pt in points:
            w.writerow([pt.sweep, pt.lam, pt.p, _fmt(pt.clean), _fmt(pt.scene), _fmt(pt.decrease)])


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greyscale, maxval 255; input values are clipped to [0, 1]."""
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    magic, dims, maxval, body = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not a P5 maxval-255 PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)
