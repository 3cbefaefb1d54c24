"""``cfa`` command line: synth, train-baseline, train-cfa, eval, attribute, ablate, repro.

Exit codes: 0 success, 2 config error, 3 prerequisite missing, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from cfa import __version__
from cfa import evalsuite as ev
from cfa.chipforge import DatasetFormatError, read_dataset, synth_dataset, write_dataset
from cfa.config import ConfigError, GridConfig, RunConfig, parse_config
from cfa.tinynet import CheckpointFormatError, configure_threads, load_model, save_model
from cfa.trainer import NumericalError, PrerequisiteError, train_baseline, train_cfa

log = logging.getLogger("cfa")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4
TABLE_COLUMNS = ("blank", "noise", "scene_clutter", "scr+3dB", "scr-3dB")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, config: RunConfig, outputs: list[Path], extra: dict | None = None) -> None:
    """Record what is needed to regenerate ``outputs`` byte for byte."""
    manifest = {
        "command": command,
        "config_digest": config.digest(),
        "config": json.loads(config.to_json()),
        "seeds": {
            "master_seed": config.scene.master_seed,
            "baseline": config.baseline.seed,
            "cfa": config.cfa.seed,
            "eval": config.eval.seed,
        },
        "versions": {
            "cfa": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> RunConfig:
    return parse_config(path) if path else RunConfig()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise PrerequisiteError(f"prerequisite missing: {what} {p}")
    return p


def _read_data(path):
    return read_dataset(_require(path, "dataset"))


def _read_model(path, stage: str | None = None):
    model = load_model(_require(path, "checkpoint"))
    if stage and model.stage != stage:
        raise PrerequisiteError(f"prerequisite mismatch: {path} holds a {model.stage} checkpoint, expected {stage}")
    return model


# ---------------------------------------------------------------- stages


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(config.scene)
    write_dataset(ds, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "synth", config, [out])
    log.info("wrote %d train / %d test chips, %d scene fields to %s", len(ds.train), len(ds.test), len(ds.scene_pool), out)
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    config = _load_config(args.config)
    ds = _read_data(args.data)
    model, history = train_baseline(ds, config.baseline)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    log_csv = out.with_name(out.stem + "_trainlog.csv")
    history.write_csv(log_csv)
    write_manifest(out.with_name(out.name + ".manifest.json"), "train-baseline", config, [out])
    return EXIT_OK


def cmd_train_cfa(args) -> int:
    config = _load_config(args.config)
    baseline = _read_model(args.baseline, "baseline")
    ds = _read_data(args.data)
    model, history = train_cfa(baseline, ds, config.cfa)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    history.write_csv(out.with_name(out.stem + "_trainlog.csv"))
    write_manifest(out.with_name(out.name + ".manifest.json"), "train-cfa", config, [out])
    return EXIT_OK


def evaluate_models(models: dict, ds, config: RunConfig, out: Path) -> dict:
    """Robustness, Shapley and cosine reports for each named model; returns the raw results."""
    e = config.eval
    robustness = {n: ev.robustness_suite(m, ds, runs=e.runs, seed=e.seed, conditions=e.conditions) for n, m in models.items()}
    shapley = {n: ev.mean_triple(ev.shapley_batch(m, ds.test)) for n, m in models.items()}
    cosine = {n: ev.layer_cosine(m, ds, e.cosine_perturbation, runs=e.runs, seed=e.seed) for n, m in models.items()}
    ev.write_robustness_csv(out / "robustness.csv", robustness)
    ev.write_shapley_csv(out / "shapley.csv", shapley)
    ev.write_cosine_csv(out / "cosine.csv", cosine)
    return {"robustness": robustness, "shapley": shapley, "cosine": cosine}


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    if args.runs is not None:
        config = config.model_copy(update={"eval": config.eval.model_copy(update={"runs": args.runs})})
    model = _read_model(args.model)
    ds = _read_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate_models({model.stage: model}, ds, config, out)
    files = [out / n for n in ("robustness.csv", "shapley.csv", "cosine.csv")]
    write_manifest(out / "manifest.json", "eval", config, files, {"model": _sha256(Path(args.model))})
    return EXIT_OK


def write_attribution(models: dict, ds, index: int, out: Path, seed: int = 0) -> list[Path]:
    """Input, scene-clutter variant and their guided-backprop maps as PGMs."""
    if not 0 <= index < len(ds.test):
        raise IndexError(f"chip index {index} outside the test set of {len(ds.test)}")
    chip = ds.test[index]
    (variant,) = ev.perturb_all([chip], "scene_clutter", ds, seed, 0)
    written = []
    for tag, img in (("input", chip.image), ("scene_variant", variant.image)):
        p = out / f"chip{index:04d}_{tag}.pgm"
        ev.write_pgm(p, img)
        written.append(p)
    for name, model in models.items():
        for tag, c in (("input", chip), ("scene_variant", variant)):
            p = out / f"chip{index:04d}_{tag}_{name}_gbp.pgm"
            ev.write_pgm(p, ev.normalize_saliency(ev.guided_backprop(model, c)))
            written.append(p)
    return written


def cmd_attribute(args) -> int:
    config = _load_config(args.config)
    model = _read_model(args.model)
    ds = _read_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = write_attribution({model.stage: model}, ds, args.chip, out, config.eval.seed)
    write_manifest(out / "manifest.json", "attribute", config, files)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    grid = config.eval.grid
    if args.grid:
        try:
            grid = GridConfig.model_validate(json.loads(Path(args.grid).read_text()))
        except (ValueError, OSError) as exc:
            raise ConfigError(f"grid: {exc}") from None
    ds = _read_data(args.data)
    baseline = _read_model(args.baseline, "baseline")
    points = ev.ablation_sweep(
        ds, baseline, grid.lambdas, grid.ps, config.cfa, runs=config.eval.runs, seed=config.eval.seed,
        mode=grid.mode, lambda_sweep_p=grid.lambda_sweep_p, p_sweep_lambda=grid.p_sweep_lambda,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_ablation_csv(out / "ablation.csv", points)
    write_manifest(out / "manifest.json", "ablate", config, [out / "ablation.csv"])
    return EXIT_OK


def summary_rows(robustness: dict) -> list[list[str]]:
    rows = []
    for name, rs in robustness.items():
        by_cond = {r.condition: r for r in rs}
        clean = rs[0].accuracy_clean if rs else float("nan")
        rows.append([name, f"{clean:.2f}"] + [f"{by_cond[c].decrease:.2f}" if c in by_cond else "" for c in TABLE_COLUMNS])
    return rows


def cmd_repro(args) -> int:
    """Full chain: synth -> baseline -> cfa -> eval -> saliency maps -> summary."""
    config = _load_config(args.config)
    out = Path(args.out or config.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "dataset.cfa"
    ds = synth_dataset(config.scene)
    write_dataset(ds, data_path)
    ds = read_dataset(data_path)
    log.info("stage synth done: %d train / %d test", len(ds.train), len(ds.test))

    baseline, hist_b = train_baseline(ds, config.baseline)
    save_model(baseline, out / "baseline.cfam")
    hist_b.write_csv(out / "trainlog_baseline.csv")
    log.info("stage train-baseline done")

    cfa_model, hist_c = train_cfa(baseline, ds, config.cfa)
    save_model(cfa_model, out / "cfa.cfam")
    hist_c.write_csv(out / "trainlog_cfa.csv")
    log.info("stage train-cfa done")

    models = {"baseline": load_model(out / "baseline.cfam"), "cfa": load_model(out / "cfa.cfam")}
    results = evaluate_models(models, ds, config, out)

    saliency_dir = out / "saliency"
    saliency_dir.mkdir(exist_ok=True)
    pgms = []
    for idx in config.eval.saliency_chips:
        if idx < len(ds.test):
            pgms += write_attribution(models, ds, idx, saliency_dir, config.eval.seed)
    fractions = {n: ev.mean_saliency_fraction(m, ds, "scene_clutter", config.eval.seed) for n, m in models.items()}
    with open(out / "saliency.csv", "w") as fh:
        fh.write("model,target_shadow_fraction\n")
        for n, f in fractions.items():
            fh.write(f"{n},{f:.6f}\n")

    rows = summary_rows(results["robustness"])
    header = ["model", "clean"] + list(TABLE_COLUMNS)
    with open(out / "summary.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    print("Decrease of accuracy (points) under interference")
    print("".join(f"{h:>14}" for h in header))
    for r in rows:
        print("".join(f"{v:>14}" for v in r))

    csvs = sorted(out.glob("*.csv"))
    artifacts = [data_path, out / "baseline.cfam", out / "cfa.cfam"] + csvs + pgms
    write_manifest(out / "manifest.json", "repro", config, artifacts)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfa", description="Contrastive feature alignment laboratory")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic chip dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-baseline", help="cross-entropy training on original chips")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("train-cfa", help="fine-tune a baseline with feature alignment")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_cfa)

    p = sub.add_parser("eval", help="robustness, Shapley and cosine reports")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="guided-backprop maps for one test chip")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--chip", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("ablate", help="lambda / p sweep from one baseline")
    p.add_argument("--grid")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("repro", help="run the whole chain and print the summary table")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, DatasetFormatError, CheckpointFormatError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
