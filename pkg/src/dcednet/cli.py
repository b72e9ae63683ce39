"""Command-line entry point: generate, preprocess, train, segment, evaluate.

Exit codes: 0 success, 2 usage or bad config, 3 I/O failure, 4 unreadable
image/mask pair during preprocessing, 5 non-finite training loss,
6 bad or corrupt checkpoint, 7 prediction/truth filename mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import dataset, metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config, parse_config
from .imageio import ImageFormatError, atomic_write_bytes, read_image, write_image
from .network import build_net
from .preprocess import (IngestError, preprocess_gray, preprocess_pipeline, render_mask,
                         to_network_input, unity_mask)
from .synthgen import PRESETS, generate_dataset
from .train import NonFiniteLossError, evaluate_run, predict_net, run_kfold, train_network, split_indices

log = logging.getLogger("dcednet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INGEST = 0, 2, 3, 4
EXIT_NONFINITE, EXIT_CHECKPOINT, EXIT_MISMATCH = 5, 6, 7


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(path) -> Config:
    if path is None:
        return Config()
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, f"{path}: {exc}") from None
    except OSError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from None


def _publish(staging: Path, out: Path) -> None:
    """Move every file under ``staging`` into ``out``, creating directories."""
    for src in sorted(staging.rglob("*")):
        if src.is_file():
            dst = out / src.relative_to(staging)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)


def _staged(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    return tempfile.TemporaryDirectory(dir=out, prefix=".staging-")


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args.config)
    try:
        scene = cfg.scene(args.tag, args.seed)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    out = Path(args.out)
    try:
        with _staged(out) as tmp:
            generate_dataset(scene, args.images, tmp)
            _publish(Path(tmp), out)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write dataset to {out}: {exc}") from None
    print(f"wrote {args.images} image/mask pairs to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args.config)
    src, out = Path(args.inp), Path(args.out)
    try:
        rows = dataset.read_manifest(src / dataset.MANIFEST)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_INGEST, f"cannot read manifest in {src}: {exc}") from None
    results, failed = [], []
    for row in rows:
        try:
            raw = read_image(src / row.image)
        except (OSError, ImageFormatError) as exc:
            failed.append(f"{src / row.image}: {exc}")
            continue
        try:
            truth = read_image(src / row.mask)
        except (OSError, ImageFormatError) as exc:
            failed.append(f"{src / row.mask}: {exc}")
            continue
        try:
            sample = preprocess_pipeline(raw, truth, cfg.preprocess, row.tag, row.counts, row.name)
        except IngestError as exc:
            failed.append(f"{src / row.image}: {exc}")
            continue
        gray = np.rint(sample.image[0, 0] * 255.0).astype(np.uint8)
        results.append((row, gray, sample.mask))
    if failed:
        raise CommandError(EXIT_INGEST, "unreadable pairs:\n  " + "\n  ".join(failed))
    try:
        with _staged(out) as tmp:
            tmp = Path(tmp)
            (tmp / "images").mkdir()
            (tmp / "masks").mkdir()
            new_rows = []
            for row, gray, mask in results:
                img_rel, mask_rel = f"images/{row.name}.pgm", f"masks/{row.name}.pgm"
                write_image(tmp / img_rel, gray)
                write_image(tmp / mask_rel, render_mask(mask))
                new_rows.append(dataset.ManifestRow(row.name, img_rel, mask_rel, row.seed,
                                                    row.tag, row.counts))
            dataset.write_manifest(tmp / dataset.MANIFEST, new_rows)
            _publish(tmp, out)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write to {out}: {exc}") from None
    print(f"preprocessed {len(results)} pairs into {out}")
    return EXIT_OK


def _write_outputs(ckpt: Path, net, cfg: Config, history_csv: str, report: metrics.MetricsReport):
    save_checkpoint(net, ckpt, cfg.to_text())
    atomic_write_bytes(Path(f"{ckpt}.history.csv"), history_csv.encode())
    atomic_write_bytes(Path(f"{ckpt}.report.txt"), report.to_text().encode())
    atomic_write_bytes(Path(f"{ckpt}.report.json"), report.to_json().encode())


def cmd_train(args) -> int:
    cfg = _config(args.config)
    try:
        samples = dataset.load_preprocessed(args.data)
    except (OSError, ValueError, ImageFormatError) as exc:
        raise CommandError(EXIT_IO, f"cannot load preprocessed data from {args.data}: {exc}") from None
    size = cfg.network.base_size
    bad = [s.name for s in samples if s.mask.shape != (size, size)]
    if bad:
        raise CommandError(EXIT_CONFIG, f"samples not at base size {size}: {', '.join(bad)}")

    def make_net():
        n = cfg.network
        return build_net(cfg.train.seed, n.levels, n.thresholds, n.widths,
                         final_threshold=cfg.train.final_threshold, base_size=n.base_size,
                         config_hash=cfg.hash())

    try:
        if args.folds:
            if args.folds < 2:
                raise CommandError(EXIT_CONFIG, "--folds must be at least 2")
            run = run_kfold(samples, cfg.train, make_net, args.folds)
            best = max(range(len(run.nets)),
                       key=lambda i: (run.report.folds[i].value("validation_accuracy"), -i))
            net = run.nets[best]
            csv = "".join(h.to_csv() if i == 0 else h.to_csv().split("\n", 1)[1]
                          for i, h in enumerate(run.histories))
            report = run.report
            for i, fold_net in enumerate(run.nets):
                save_checkpoint(fold_net, Path(f"{args.checkpoint}.fold{i + 1}"), cfg.to_text())
        else:
            train_idx, val_idx = split_indices(len(samples), cfg.train.split_fraction, cfg.train.seed)
            net, hist = train_network(make_net(), samples, cfg.train,
                                      train_idx=train_idx, val_idx=val_idx)
            report = metrics.build_report([evaluate_run(net, samples, train_idx, val_idx)])
            csv = hist.to_csv()
    except NonFiniteLossError as exc:
        raise CommandError(EXIT_NONFINITE, f"training aborted: {exc}") from None
    try:
        _write_outputs(Path(args.checkpoint), net, cfg, csv, report)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write training outputs: {exc}") from None
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_segment(args) -> int:
    try:
        net, header = load_checkpoint(args.checkpoint)
        cfg = parse_config(header.config_text) if header.config_text else Config()
    except CheckpointError as exc:
        raise CommandError(EXIT_CHECKPOINT, f"{args.checkpoint}: {exc}") from None
    except ConfigError as exc:
        raise CommandError(EXIT_CHECKPOINT, f"{args.checkpoint}: embedded config invalid: {exc}") from None
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    cfg.preprocess.size = net.base_size
    try:
        raw = read_image(args.inp)
        gray = preprocess_gray(raw, cfg.preprocess)
    except (OSError, ImageFormatError, IngestError) as exc:
        raise CommandError(EXIT_IO, f"cannot read image {args.inp}: {exc}") from None
    prob = predict_net(net, to_network_input(gray))
    mask = metrics.binarize(prob[0, 0])
    try:
        write_image(args.out, render_mask(mask))
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write mask {args.out}: {exc}") from None
    return EXIT_OK


def _mask_index(directory: Path) -> dict[str, tuple[Path, str]]:
    """name -> (mask path, tag); uses a manifest when one is present."""
    manifest = directory / dataset.MANIFEST
    if manifest.exists():
        return {r.name: (directory / r.mask, r.tag) for r in dataset.read_manifest(manifest)}
    return {p.stem: (p, "unknown") for p in sorted(directory.glob("*.pgm"))}


def cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    try:
        preds, truths = _mask_index(pred_dir), _mask_index(truth_dir)
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_IO, f"cannot list masks: {exc}") from None
    only_pred, only_truth = sorted(set(preds) - set(truths)), sorted(set(truths) - set(preds))
    if only_pred or only_truth or not truths:
        raise CommandError(EXIT_MISMATCH, "prediction and truth sets differ\n"
                           f"  only in {pred_dir}: {only_pred}\n  only in {truth_dir}: {only_truth}")
    records = []
    try:
        for name in sorted(truths):
            truth_path, tag = truths[name]
            truth = unity_mask(read_image(truth_path))
            pred = unity_mask(read_image(preds[name][0]))
            if pred.shape != truth.shape:
                raise CommandError(EXIT_MISMATCH, f"{name}: prediction {pred.shape} vs truth {truth.shape}")
            records.append(metrics.evaluate_image(pred, truth, tag))
    except (OSError, ImageFormatError) as exc:
        raise CommandError(EXIT_IO, f"cannot read mask: {exc}") from None
    report = metrics.build_report([metrics.FoldResult(test=records)])
    try:
        atomic_write_bytes(Path(args.report), report.to_text().encode())
        atomic_write_bytes(Path(f"{args.report}.json"), report.to_json().encode())
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write report {args.report}: {exc}") from None
    print(report.to_text(), end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dced", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic smear dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tag", choices=sorted(PRESETS), default="healthy")
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="filter, normalize and resize image/mask pairs")
    pp.add_argument("--in", dest="inp", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--config")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train a multi-level network")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--folds", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment one image with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"dced {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
