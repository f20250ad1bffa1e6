"""Command-line entry point: ``cmgan synth | train | eval | report``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import data as D
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DimensionMismatchError,
    DivergenceError,
    FormatError,
    MismatchUnsatisfiableError,
    StratificationError,
)
from .eval import evaluate
from .model import CmGanModel, load_checkpoint, save_checkpoint
from .training import TrainingDiverged, train

log = logging.getLogger("cmgan")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_DIVERGENCE = 4
EXIT_DIMENSION = 5

SPLITS = ("train", "val", "test")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_section("synth", {"seed": args.seed})
        cfg = cfg.with_section("split", {"seed": args.seed})
        cfg = cfg.with_section("train", {"seed": args.seed})
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "no_weight_sharing", False):
        overrides["weight_sharing"] = False
    if getattr(args, "no_semantic", False):
        overrides["semantic_constraint"] = False
    if getattr(args, "inter_only", False):
        overrides["intra_discrimination"] = False
    if getattr(args, "no_adversarial", False):
        overrides["adversarial"] = False
    if overrides:
        cfg = cfg.with_section("train", overrides)
    return cfg


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.synth
    spec.validate()
    out.mkdir(parents=True, exist_ok=True)
    ds = D.generate_synthetic(spec)
    parts = D.split_indices(ds.labels, cfg.split.fractions, cfg.split.seed)
    files = {}
    for name, idx in zip(SPLITS, parts):
        D.write_index_manifest(out / f"{name}.idx", idx)
        if idx.size:
            D.write_features(ds.subset(idx), out / f"{name}.json")
            files[name] = f"{name}.json"
    provenance = {"kind": "synthetic-dataset", "config": cfg.to_dict(), "seed": spec.seed, "files": files}
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    cfg.write(out / "config.resolved.json")
    return provenance


def cmd_train(cfg: RunConfig, data_dir: Path, out: Path) -> dict:
    train_ds = D.load_features(data_dir / "train.json")
    val_ds = D.load_features(data_dir / "val.json")
    cfg.train.validate()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.json")
    dims = cfg.model.dims(train_ds.d_img, train_ds.d_txt, train_ds.n_classes)
    model = CmGanModel.build(dims, cfg.train.seed, weight_sharing=cfg.train.weight_sharing)
    meta = {"config": cfg.to_dict(), "seed": cfg.train.seed}
    try:
        best, tlog = train(model, train_ds, val_ds, cfg.train, log_path=out / "train_log.csv")
    except TrainingDiverged as exc:
        (out / "diverged.txt").write_text(str(exc) + "\n")
        raise
    meta.update(best_epoch=tlog.best_epoch, discriminator_steps=tlog.discriminator_steps,
                generator_steps=tlog.generator_steps)
    save_checkpoint(best, out / "checkpoint.cmgc", meta)
    digest = file_digest(out / "checkpoint.cmgc")
    (out / "checkpoint.sha256").write_text(digest + "\n")
    return {"checkpoint": str(out / "checkpoint.cmgc"), "sha256": digest, "best_epoch": tlog.best_epoch}


def cmd_eval(checkpoint: Path, testset_path: Path, out: Path, cfg: RunConfig | None = None):
    model, meta = load_checkpoint(checkpoint)
    test = D.load_features(testset_path)
    dims = model.dims
    if (dims.d_img, dims.d_txt) != (test.d_img, test.d_txt):
        raise DimensionMismatchError(
            f"checkpoint expects image dim {dims.d_img} and text dim {dims.d_txt}; "
            f"test set has image dim {test.d_img} and text dim {test.d_txt}")
    exclude_self = cfg.eval.exclude_self if cfg is not None else True
    report = evaluate(model, test, exclude_self=exclude_self)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.md").write_text(report.to_markdown())
    (out / "per_category.csv").write_text(report.per_category_csv())
    provenance = {"checkpoint_sha256": file_digest(checkpoint), "checkpoint_meta": meta,
                  "testset": str(testset_path.name), "exclude_self": exclude_self}
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return report


def cmd_report(runs: list[Path], out: Path) -> str:
    """Combine several eval directories into one ablation-style markdown table."""
    lines = ["| Run | Image→Text | Text→Image | Average | Image→All | Text→All | Average |",
             "|---|---|---|---|---|---|---|"]
    for run in runs:
        csv_path = run / "report.csv"
        if not csv_path.exists():
            raise FormatError(f"{csv_path}: no report found")
        rows = csv_path.read_text().splitlines()
        if len(rows) != 2:
            raise FormatError(f"{csv_path}: expected a header and one row")
        values = rows[1].split(",")[:6]
        lines.append("| " + run.name + " | " + " | ".join(f"{float(v):.3f}" for v in values) + " |")
    text = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.md").write_text(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmgan", description="Cross-modal GAN common-representation learning")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("synth", help="generate a synthetic paired dataset with train/val/test splits")
    common(s)
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model on a synthesized or converted dataset")
    common(t)
    t.add_argument("--data", type=Path, required=True, help="directory holding train.json/val.json")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-weight-sharing", action="store_true")
    t.add_argument("--no-semantic", action="store_true")
    t.add_argument("--inter-only", action="store_true", help="drop intra-modality discrimination")
    t.add_argument("--no-adversarial", action="store_true", help="reconstruction-only autoencoder baseline")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True, help="test-set manifest (e.g. data/test.json)")

    r = sub.add_parser("report", help="summarise several eval output directories")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("runs", type=Path, nargs="+")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cfg = _resolve(args)
            prov = cmd_synth(cfg, args.out)
            log.info("wrote %s", ", ".join(prov["files"].values()))
        elif args.command == "train":
            cfg = _resolve(args)
            res = cmd_train(cfg, args.data, args.out)
            print(res["sha256"])
        elif args.command == "eval":
            cfg = _resolve(args)
            report = cmd_eval(args.checkpoint, args.data, args.out, cfg)
            sys.stdout.write(report.to_markdown())
        else:
            sys.stdout.write(cmd_report(args.runs, args.out))
    except MismatchUnsatisfiableError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ConfigError, StratificationError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FormatError as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except DimensionMismatchError as exc:
        log.error("dimension mismatch: %s", exc)
        return EXIT_DIMENSION
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return EXIT_FORMAT
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
