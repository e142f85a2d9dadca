"""``plab`` command line: gen-data, train, eval, explain, analyze.

Every command resolves a :class:`~plab.config.RunConfig` (defaults, then
``--config`` file, then ``--set key=value`` overrides, then explicit flags),
echoes it to ``run_config.txt`` in its output directory and writes nothing
outside that directory.  Exit status is 0 on success, 1 for usage or
configuration errors and 2 for runtime failures, with a one-line message on
stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, explain
from .config import ConfigError, RunConfig, load_run_config
from .data import dataset_stats, generate_dataset, load_arrays, load_sample, read_dataset_spec, read_manifest, \
    write_stats_csv
from .model import load_checkpoint, save_checkpoint
from .train import Splits, train

log = logging.getLogger("plab")

CHECKPOINT_NAME = "model.plab"
CONFIG_ECHO_NAME = "run_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage problems are 1 here
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override one config field (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _with_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="dataset directory (config key data_dir)")


def _with_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", metavar="PATH", help=f"model checkpoint (default: <out>/{CHECKPOINT_NAME})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic plate dataset into --out (default: data_dir)")
    _common(p)

    p = sub.add_parser("train", help="train a model; writes checkpoint and per-epoch metrics CSV")
    _common(p)
    _with_data(p)

    p = sub.add_parser("eval", help="per-split accuracy and control checks for a checkpoint")
    _common(p)
    _with_data(p)
    _with_checkpoint(p)

    p = sub.add_parser("explain", help="Grad-CAM heat map and channel attention for one sample")
    _common(p)
    _with_data(p)
    _with_checkpoint(p)
    p.add_argument("--sample", required=True, metavar="ID", help="sample id from the manifest")
    p.add_argument("--class", dest="class_id", type=int, metavar="K",
                   help="target class (default: the model's prediction)")
    p.add_argument("--layer", help="spatial layer name (default: last dense layer)")

    p = sub.add_parser("analyze", help="templates, 2-D projections, spread report and 1x1 redundancy")
    _common(p)
    _with_data(p)
    _with_checkpoint(p)
    p.add_argument("--tol", type=float, help="redundancy tolerance (default: 1e-3 * max |w|)")
    return parser


def _resolve(args) -> RunConfig:
    explicit = {"seed": args.seed, "output_dir": args.out}
    if getattr(args, "data", None) is not None:
        explicit["data_dir"] = args.data
    cfg = load_run_config(args.config, args.overrides, **explicit)
    cfg.validate()
    return cfg


def _prepare_out(path: str | Path, cfg: RunConfig) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO_NAME).write_text(cfg.to_text())
    return out


def _checkpoint(args, cfg: RunConfig):
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / CHECKPOINT_NAME
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_data(args, cfg: RunConfig) -> None:
    target = Path(args.out) if args.out else Path(cfg.data_dir)
    if (target / "manifest.csv").exists():
        raise FileExistsError(f"{target} already holds a dataset; choose an empty --out")
    rows = generate_dataset(cfg.dataset_spec(), target)
    _prepare_out(target, cfg)
    write_stats_csv(dataset_stats(target), target / "stats.csv")
    log.info("wrote %d samples to %s", len(rows), target)


def cmd_train(args, cfg: RunConfig) -> None:
    out = _prepare_out(cfg.output_dir, cfg)
    splits = Splits.load(cfg.data_dir)
    result = train(cfg, splits, metrics_path=out / "metrics.csv")
    save_checkpoint(result.model, out / CHECKPOINT_NAME)
    log.info("saved %s", out / CHECKPOINT_NAME)


def _accuracy(model, arrays) -> tuple[int, float]:
    keep = np.flatnonzero(arrays.labels >= 0)
    if len(keep) == 0:
        return 0, float("nan")
    correct = 0
    for s in range(0, len(keep), 64):
        idx = keep[s:s + 64]
        pred = model.predict_proba(arrays.images[idx], arrays.cell_onehots[idx]).argmax(axis=1)
        correct += int((pred == arrays.labels[idx]).sum())
    return len(keep), correct / len(keep)


def cmd_eval(args, cfg: RunConfig) -> None:
    model = _checkpoint(args, cfg)
    out = _prepare_out(cfg.output_dir, cfg)
    rows = read_manifest(cfg.data_dir)
    acc_rows = []
    for split in ("train", "val", "test"):
        n, acc = _accuracy(model, load_arrays(cfg.data_dir, (split,), rows))
        acc_rows.append((split, n, f"{acc:.10g}"))
    analysis.write_rows(out / "accuracy.csv", ["split", "labeled_samples", "accuracy"], acc_rows)
    report = analysis.control_check(model, load_arrays(cfg.data_dir, ("test",), rows))
    analysis.write_rows(out / "controls.csv", ["id", "metric", "value"], report.rows())
    if report.notice:
        log.warning("%s", report.notice)


def cmd_explain(args, cfg: RunConfig) -> None:
    model = _checkpoint(args, cfg)
    sample = load_sample(cfg.data_dir, args.sample)
    onehot = sample.cell_onehot
    class_id = args.class_id
    if class_id is None:
        class_id = int(model.predict_proba(sample.planes, onehot).argmax())
    cam = explain.gradcam(model, sample.planes, onehot, class_id, args.layer)
    attention = explain.channel_attention(cam, sample.planes)
    out = _prepare_out(cfg.output_dir, cfg)
    stem = f"cam_{args.sample}_class{class_id}"
    h, w = sample.planes.shape[1:]
    explain.write_pgm8(out / f"{stem}.pgm", explain.normalized_cam(cam, h, w))
    explain.write_metric_rows(out / f"{stem}_attention.csv", explain.attention_rows(cam.layer_name, attention))


def _xy_rows(ids, coords, junk) -> list[tuple]:
    return [(i, f"{x:.10g}", f"{y:.10g}", int(j)) for i, (x, y), j in zip(ids, coords, junk)]


def cmd_analyze(args, cfg: RunConfig) -> None:
    model = _checkpoint(args, cfg)
    spec = read_dataset_spec(cfg.data_dir)
    junk = spec.junk_mask()
    if len(junk) != model.config.num_classes:
        raise ValueError(f"dataset has {len(junk)} classes but the model has {model.config.num_classes}")
    out = _prepare_out(cfg.output_dir, cfg)
    arrays = load_arrays(cfg.data_dir, ("train", "val"))
    feats = np.concatenate([
        model.forward_embedding(arrays.images[s:s + 64], arrays.cell_onehots[s:s + 64]).data
        for s in range(0, len(arrays), 64)
    ]) if len(arrays) else np.zeros((0, model.config.embedding_dim))
    dims = [f"d{k}" for k in range(model.config.embedding_dim)]
    analysis.write_rows(out / "features.csv", ["id", "class_label", *dims],
                        [(i, int(y), *(f"{v:.10g}" for v in f)) for i, y, f in zip(arrays.ids, arrays.labels, feats)])
    if len(feats) >= 2:
        analysis.write_rows(out / "features_2d.csv", ["id", "x", "y", "is_junk"],
                            _xy_rows(arrays.ids, analysis.project_2d(feats), np.zeros(len(feats), bool)))
    spread_rows = []
    for head in analysis.HEADS:
        tm = analysis.extract_templates(model, head, junk)
        ids = [f"class{k}" for k in range(len(junk))]
        analysis.write_rows(out / f"templates_{head}.csv", ["id", "is_junk", *dims],
                            [(i, int(j), *(f"{v:.10g}" for v in w)) for i, j, w in zip(ids, junk, tm.W)])
        analysis.write_rows(out / f"templates_{head}_2d.csv", ["id", "x", "y", "is_junk"],
                            _xy_rows(ids, analysis.project_2d(tm.W), junk))
        rep = analysis.spread_report(tm, feats, arrays.labels)
        gap = "" if rep.junk_vs_real_cosine_gap is None else f"{rep.junk_vs_real_cosine_gap:.10g}"
        spread_rows += [(head, "mean_offdiag_cosine", f"{rep.mean_offdiag_cosine:.10g}"),
                        (head, "junk_vs_real_cosine_gap", gap)]
        spread_rows += [(head, f"tightness_class{k}", f"{v:.10g}") for k, v in sorted(rep.cluster_tightness.items())]
    analysis.write_rows(out / "spread.csv", ["head", "metric", "value"], spread_rows)
    explain.write_metric_rows(out / "redundancy.csv", explain.redundancy_rows(model, args.tol))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg = _resolve(args)
    except (UsageError, ConfigError) as exc:
        print(f"plab: usage error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"plab: {args.command} failed: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
