"""Command-line pipeline: generate, train, score, evaluate, visualize.

Configuration is layered: built-in defaults, then a JSON config file
(--config), then individual flags. The fully resolved configuration is echoed
into every output artifact. Exit codes: 0 success, 1 usage error, 2 runtime
failure. SPADE_DATA_DIR provides the default corpus root.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import dataset, detector, evaluation, models, saliency
from .evaluation import default_cnn_train, default_vae_train

ENV_DATA_DIR = "SPADE_DATA_DIR"


class UsageError(Exception):
    pass


def default_config() -> dict:
    return {
        "source": None,
        "corpus_root": None,
        "normal_digit": 0,
        "known_digits": [1, 3, 5, 7, 9],
        "train_fraction": 0.8,
        "seed": 0,
        "noise": asdict(dataset.NoiseConfig()),
        "vae_train": asdict(default_vae_train()),
        "cnn_train": asdict(default_cnn_train()),
        "vae_arch": asdict(models.VaeConfig()),
        "cnn_arch": asdict(models.CnnConfig()),
        "max_train_per_class": None,
        "max_eval_per_digit": None,
        "jobs": 1,
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_digits(text: str) -> list[int]:
    try:
        return [int(d) for d in text.replace(" ", "").split(",") if d != ""]
    except ValueError as e:
        raise UsageError(f"bad digit list {text!r}: {e}") from e


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < flags; returns the fully resolved dict."""
    cfg = default_config()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        cfg = _merge(cfg, file_cfg)
    flag_map = {
        "source": "source",
        "corpus": "corpus_root",
        "normal_digit": "normal_digit",
        "train_fraction": "train_fraction",
        "seed": "seed",
        "max_train_per_class": "max_train_per_class",
        "max_eval_per_digit": "max_eval_per_digit",
        "jobs": "jobs",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "known_digits", None) is not None:
        cfg["known_digits"] = _parse_digits(args.known_digits)
    for model_key in ("vae", "cnn"):
        for field, flag in (("max_epochs", "epochs"), ("learning_rate", "lr"),
                            ("minibatch_size", "batch_size"), ("convergence_patience", "patience")):
            value = getattr(args, f"{model_key}_{flag}", None) or getattr(args, flag, None)
            if value is not None:
                cfg[f"{model_key}_train"][field] = value
    if getattr(args, "seed", None) is not None:
        cfg["vae_train"]["seed"] = args.seed
        cfg["cnn_train"]["seed"] = args.seed
    if cfg["corpus_root"] is None:
        cfg["corpus_root"] = os.environ.get(ENV_DATA_DIR)
    return cfg


def _corpus_root(cfg: dict) -> Path:
    if not cfg["corpus_root"]:
        raise UsageError(f"no corpus root: pass --corpus or set {ENV_DATA_DIR}")
    return Path(cfg["corpus_root"])


def _split_dir(root: Path, digit: int) -> Path:
    return root / f"known_{digit}"


def _experiment_config(cfg: dict, digits, methods, verbose=True) -> evaluation.ExperimentConfig:
    return evaluation.ExperimentConfig(
        digits=tuple(digits),
        methods=tuple(methods),
        normal_digit=cfg["normal_digit"],
        train_fraction=cfg["train_fraction"],
        seed=cfg["seed"],
        noise=dataset.NoiseConfig(**cfg["noise"]),
        vae_train=models.TrainConfig(**cfg["vae_train"]),
        cnn_train=models.TrainConfig(**cfg["cnn_train"]),
        vae_arch=models.VaeConfig(**{**cfg["vae_arch"], "channels": tuple(cfg["vae_arch"]["channels"])}),
        cnn_arch=models.CnnConfig(**{**cfg["cnn_arch"], "channels": tuple(cfg["cnn_arch"]["channels"])}),
        max_train_per_class=cfg["max_train_per_class"],
        max_eval_per_digit=cfg["max_eval_per_digit"],
        jobs=cfg["jobs"],
        verbose=verbose,
    )


def _write_run_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": 1, "run_config": cfg}, indent=1, sort_keys=True))


def _load_checkpoint(path: str | None, kind: str, flag: str):
    if path is None:
        raise UsageError(f"method requires a {kind} checkpoint: pass {flag}")
    model = models.load_checkpoint(path)
    expected = models.VaeModel if kind == "vae" else models.CnnModel
    if not isinstance(model, expected):
        raise UsageError(f"{path} is a {type(model).__name__}, expected {kind}")
    return model


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg["source"]:
        raise UsageError("generate needs a source corpus: pass --source or set it in the config file")
    out_root = Path(args.out) if args.out else _corpus_root(cfg)
    source = dataset.load_source_corpus(cfg["source"])
    source = dataset.partition_source(source, cfg["train_fraction"], cfg["seed"])
    source = dataset.cap_source(
        source,
        max_train_per_digit=cfg["max_train_per_class"],
        max_eval_per_digit=cfg["max_eval_per_digit"],
    )
    noise = dataset.NoiseConfig(**cfg["noise"])
    for digit in cfg["known_digits"]:
        spec = dataset.SplitSpec(
            normal_digit=cfg["normal_digit"],
            known_anomaly_digit=digit,
            train_fraction=cfg["train_fraction"],
            seed=cfg["seed"],
        )
        split = dataset.build_splits(source, spec, noise)
        path = dataset.save_corpus(split, _split_dir(out_root, digit))
        counts = split.counts_by_role()
        eval_digits = {}
        for s in split.eval_all:
            eval_digits[s.digit_label] = eval_digits.get(s.digit_label, 0) + 1
        print(f"split known_{digit}: train_normal={len(split.train_normal)} "
              f"train_known_anomaly={len(split.train_known_anomaly)} eval={len(split.eval_all)}")
        print(f"  eval roles: {counts}")
        print(f"  eval digits: {dict(sorted(eval_digits.items()))}")
        print(f"  checksum: {dataset.corpus_checksum(path)}")
    _write_run_config(cfg, out_root / "run_config.json")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    root = _corpus_root(cfg)
    out = Path(args.out)
    if args.model == "cnn":
        if args.known_digit is None:
            raise UsageError("--model cnn needs --known-digit to define the known-anomaly class")
        split_path = _split_dir(root, args.known_digit)
        split = dataset.load_corpus(split_path, include_eval=False)
        model = models.train_cnn(
            split,
            models.TrainConfig(**cfg["cnn_train"]),
            models.CnnConfig(**{**cfg["cnn_arch"], "channels": tuple(cfg["cnn_arch"]["channels"])}),
        )
        train_cfg = models.TrainConfig(**cfg["cnn_train"])
    else:
        if args.known_digit is not None:
            print("warning: --model vae ignores --known-digit (the VAE trains on the normal class only)",
                  file=sys.stderr)
        candidates = sorted(root.glob("known_*")) if args.known_digit is None else [
            _split_dir(root, args.known_digit)
        ]
        if not candidates:
            raise UsageError(f"no generated splits under {root}; run generate first")
        split = dataset.load_corpus(candidates[0], include_eval=False)
        model = models.train_vae(
            split,
            models.TrainConfig(**cfg["vae_train"]),
            models.VaeConfig(**{**cfg["vae_arch"], "channels": tuple(cfg["vae_arch"]["channels"])}),
        )
        train_cfg = models.TrainConfig(**cfg["vae_train"])
    models.save_checkpoint(model, out, train_cfg)
    (out / "loss_history.json").write_text(json.dumps(model.loss_history, indent=1))
    _write_run_config(cfg, out / "run_config.json")
    print(f"checkpoint written to {out} after {model.trained_epochs} epochs")
    if getattr(model, "holdout_accuracy", None) is not None:
        print(f"held-out accuracy: {model.holdout_accuracy:.3f}")
    return 0


def _known_digit_for_score(args, root: Path) -> int:
    if args.known_digit is not None:
        return args.known_digit
    dirs = sorted(root.glob("known_*"))
    if len(dirs) == 1:
        return int(dirs[0].name.split("_", 1)[1])
    raise UsageError("--known-digit is required when the corpus root holds multiple splits")


def cmd_score(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    root = _corpus_root(cfg)
    digit = _known_digit_for_score(args, root)
    split = dataset.load_corpus(_split_dir(root, digit))
    method = args.method
    vae = cnn = None
    if method in ("spade", "naive_spade", "vae"):
        vae = _load_checkpoint(args.vae, "vae", "--vae")
    if method in ("spade", "naive_spade", "cnn"):
        cnn = _load_checkpoint(args.cnn, "cnn", "--cnn")
    records = detector.score_corpus(detector.ModelSet(vae=vae, cnn=cnn), split, method)
    out = Path(args.out)
    detector.write_scores_csv(records, out)
    detector.write_scores_json(records, out.with_suffix(".json"))
    _write_run_config(cfg, out.parent / "run_config.json")
    print(f"scored {len(records)} evaluation samples with {method} -> {out}")
    if args.overlay_dir:
        if vae is None or cnn is None:
            raise UsageError("--overlay-dir needs both --vae and --cnn checkpoints")
        _write_overlays(split, vae, cnn, records, Path(args.overlay_dir), args.overlay_count)
    return 0


def _write_overlays(split, vae, cnn, records, out_dir: Path, count: int) -> None:
    by_id = {s.sample_id: s for s in split.eval_all}
    top = sorted(records, key=lambda r: (-r.score, r.sample_id))[:count]
    for rank, record in enumerate(top):
        sample = by_id[record.sample_id]
        unit = models.to_unit_image(sample.pixels)
        roi = saliency.spade_roi(cnn, unit, models.reconstruct(vae, unit))
        saliency.render_overlay(sample.pixels, roi, out_dir / f"overlay_{rank:03d}_{record.sample_id}.png")
    print(f"wrote {len(top)} overlays to {out_dir}")


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    digits = _parse_digits(args.digits) if args.digits else cfg["known_digits"]
    methods = tuple(args.methods.split(",")) if args.methods else detector.METHODS
    for m in methods:
        if m not in detector.METHODS:
            raise UsageError(f"unknown method {m!r} (expected one of {detector.METHODS})")
    shared_vae = models.load_checkpoint(args.vae) if args.vae else None
    cnn_for = None
    if args.cnn:
        if len(digits) != 1:
            raise UsageError("--cnn applies to a single cell; pass exactly one digit via --digits")
        fixed_cnn = _load_checkpoint(args.cnn, "cnn", "--cnn")
        cnn_for = lambda d: fixed_cnn  # noqa: E731
    out_dir = Path(args.out)
    seeds = _parse_digits(args.seeds) if args.seeds else [cfg["seed"]]

    for seed in seeds:
        run_cfg = _merge(cfg, {"seed": seed,
                               "vae_train": {"seed": seed},
                               "cnn_train": {"seed": seed}})
        exp_cfg = _experiment_config(run_cfg, digits, methods, verbose=not args.quiet)
        echo = {"experiment": exp_cfg.to_dict(), "run": run_cfg}
        if cfg["source"]:
            source = dataset.load_source_corpus(cfg["source"])
            report = evaluation.run_table1_experiment(source, exp_cfg, shared_vae=shared_vae,
                                                      config_echo=echo)
        else:
            root = _corpus_root(cfg)

            def split_for(d):
                return dataset.load_corpus(_split_dir(root, d))

            report = evaluation.run_experiment_cells(split_for, exp_cfg, shared_vae=shared_vae,
                                                     cnn_for=cnn_for, config_echo=echo)
        dest = out_dir if len(seeds) == 1 else out_dir / f"seed_{seed}"
        evaluation.export_report(report, dest, plots=not args.no_plots)
        print(evaluation.format_report_table(report))
        print(f"report written to {dest}")
        if not report.complete:
            return 2
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    root = _corpus_root(cfg)
    digit = _known_digit_for_score(args, root)
    split = dataset.load_corpus(_split_dir(root, digit))
    vae = _load_checkpoint(args.vae, "vae", "--vae")
    cnn = _load_checkpoint(args.cnn, "cnn", "--cnn")
    records = detector.score_corpus(detector.ModelSet(vae=vae, cnn=cnn), split, args.method)
    _write_overlays(split, vae, cnn, records, Path(args.out), args.count)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spade",
        description="Spatially-weighted anomaly detection pipeline: noisy-digit benchmark "
                    "generation, VAE/CNN training, scoring, and AUROC evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults < file < flags)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--corpus", help=f"corpus root (default ${ENV_DATA_DIR})")
        p.add_argument("--jobs", type=int, help="worker cap for parallel stages")

    p = sub.add_parser("generate", help="build the noisy benchmark corpus from a source corpus")
    common(p)
    p.add_argument("--source", help="source corpus: IDX directory, .npz, or .csv/.csv.gz")
    p.add_argument("--out", help="output corpus root (default --corpus)")
    p.add_argument("--known-digits", help="comma list of known-anomaly digits (default 1,3,5,7,9)")
    p.add_argument("--normal-digit", type=int, help="the correct-pattern digit (default 0)")
    p.add_argument("--train-fraction", type=float, help="train share for unpartitioned sources")
    p.add_argument("--max-train-per-class", type=int, help="cap train images per digit")
    p.add_argument("--max-eval-per-digit", type=int, help="cap eval images per digit")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="train the VAE or the CNN on a generated corpus")
    common(p)
    p.add_argument("--model", choices=("vae", "cnn"), required=True)
    p.add_argument("--known-digit", type=int, help="known-anomaly digit (required for cnn)")
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--epochs", type=int, dest="epochs", help="max training epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--patience", type=int, dest="patience")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("score", help="score the evaluation set with one method")
    common(p)
    p.add_argument("--method", choices=detector.METHODS, required=True)
    p.add_argument("--known-digit", type=int, help="which generated split to score")
    p.add_argument("--vae", help="VAE checkpoint directory")
    p.add_argument("--cnn", help="CNN checkpoint directory")
    p.add_argument("--out", required=True, help="scores CSV path (JSON written alongside)")
    p.add_argument("--overlay-dir", help="write ROI overlays for the highest-scoring samples")
    p.add_argument("--overlay-count", type=int, default=8)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("evaluate", help="run the AUROC experiment matrix and export the report")
    common(p)
    p.add_argument("--source", help="source corpus; generates splits in memory")
    p.add_argument("--digits", help="comma list of known-anomaly digits (default config)")
    p.add_argument("--methods", help=f"comma list from {','.join(detector.METHODS)}")
    p.add_argument("--vae", help="reuse a trained VAE checkpoint")
    p.add_argument("--cnn", help="reuse a trained CNN checkpoint (single-digit runs)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--seeds", help="comma list of seeds; repeats the run per seed")
    p.add_argument("--max-train-per-class", type=int)
    p.add_argument("--max-eval-per-digit", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--normal-digit", type=int)
    p.add_argument("--no-plots", action="store_true", help="skip ROC curve images")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("visualize", help="write ROI overlay images for top-scoring samples")
    common(p)
    p.add_argument("--known-digit", type=int)
    p.add_argument("--vae", required=True)
    p.add_argument("--cnn", required=True)
    p.add_argument("--method", choices=detector.METHODS, default="spade",
                   help="ranking method for choosing samples")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True, help="overlay output directory")
    p.set_defaults(handler=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.handler(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
