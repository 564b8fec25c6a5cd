"""Command-line entry point: ``vtadl train | eval | heatmap``.

Exit codes: 0 success, 1 configuration error, 2 data/checkpoint error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, ModelConfig, TrainConfig, from_dict
from .metrics import (heatmap_from_patch_scores, pr_auc, pro_curve, read_float_grid, roc_auc,
                      write_float_grid, write_pgm16, global_score)
from .trainer import (CheckpointError, NumericError, Trainer, load_checkpoint, save_checkpoint,
                      score_samples, split_validation, stack_images)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_KEYS = {"model", "train", "data", "out_dir"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict = field(default_factory=dict)
    out_dir: str | None = None


def read_json(path, code: int = EXIT_CONFIG) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(code, f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(code, f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CliError(code, f"{path}: top level must be a JSON object")
    return doc


def parse_run_config(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown run config keys: {', '.join(unknown)}")
    return RunConfig(from_dict(ModelConfig, doc.get("model", {})),
                     from_dict(TrainConfig, doc.get("train", {})),
                     dict(doc.get("data", {})), doc.get("out_dir"))


# -- dataset specs ---------------------------------------------------------------
def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_dataset(spec: dict, base: Path = Path(".")) -> tuple[list[D.Sample], list[D.Sample]]:
    """Materialize ``(train, test)`` from a data spec.

    Kinds: ``synthetic`` (generator fields), ``idx`` (one-class MNIST-style
    files) and ``image_dir`` (MVTec-style tree).
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "synthetic":
        try:
            cfg = D.SyntheticConfig(**spec)
        except TypeError as exc:
            raise ConfigError(f"synthetic data spec: {exc}") from exc
        return D.generate_synthetic(cfg)
    if kind == "idx":
        return _load_idx_spec(spec, base)
    if kind == "image_dir":
        pre = D.Preprocess(spec.pop("resize", None), spec.pop("crop", None))
        root = _resolve(base, spec.pop("root"))
        if spec:
            raise ConfigError(f"unknown image_dir keys: {sorted(spec)}")
        return D.load_image_dir(root, "train", pre), D.load_image_dir(root, "test", pre)
    raise ConfigError(f"unknown data kind {kind!r}")


def _load_idx_spec(spec: dict, base: Path):
    allowed = {"train_images", "train_labels", "test_images", "test_labels", "normal_digit", "pad_to",
               "max_train", "test_normal", "test_anomalous", "seed"}
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ConfigError(f"unknown idx keys: {unknown}")
    digit = int(spec.get("normal_digit", 1))
    pad = spec.get("pad_to")
    seed = int(spec.get("seed", 0))

    def prep(samples):
        if pad:
            for s in samples:
                s.image = D.pad_to(s.image, pad, pad)
        return samples

    train = D.load_idx(_resolve(base, spec["train_images"]), _resolve(base, spec["train_labels"]), digit)
    train = [s for s in train if s.label == D.NORMAL][: spec.get("max_train")]
    test = D.load_idx(_resolve(base, spec["test_images"]), _resolve(base, spec["test_labels"]), digit)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    picked = []
    for label, key in ((D.NORMAL, "test_normal"), (D.ANOMALOUS, "test_anomalous")):
        pool = [s for s in test if s.label == label]
        n = min(int(spec.get(key, len(pool))), len(pool))
        picked += [pool[i] for i in sorted(rng.permutation(len(pool))[:n])]
    return prep(train), prep(picked)


def _check_shapes(samples, mc: ModelConfig):
    want = (mc.image_height, mc.image_width, mc.channels)
    for s in samples:
        if s.image.shape != want:
            raise CliError(EXIT_DATA, f"sample {s.name or '?'} has shape {s.image.shape}, checkpoint expects {want}")


@contextlib.contextmanager
def thread_limit():
    n = os.environ.get("VTADL_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


# -- commands ---------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    try:
        run = parse_run_config(read_json(cfg_path))
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = Path(args.out or run.out_dir or "run")
    try:
        train_set, _ = load_dataset(run.data, cfg_path.parent)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except (D.DataError, OSError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"dataset error: {exc}") from exc
    _check_shapes(train_set, run.model)
    try:
        D.check_normal_only(train_set)
    except D.DataError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    fit, val = split_validation(train_set, run.train.val_fraction, args.seed)
    trainer = Trainer(run.model, run.train, args.seed)
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "nll", "mse", "ssim", "total"])
        try:
            history = trainer.fit(stack_images(fit), run.train.epochs,
                                  lambda e: w.writerow([e.epoch, repr(e.nll), repr(e.mse), repr(e.ssim), repr(e.total)]))
        except NumericError as exc:
            raise CliError(EXIT_NUMERIC, f"numeric failure: {exc}") from exc
    trainer.normalizer = trainer.net.fit_normalizer(stack_images(val or fit))
    save_checkpoint(trainer.checkpoint(), out / "ckpt.vtadl")
    summary = {"final_loss": history[-1].total if history else None, "epochs": len(history),
               "wall_time_s": time.time() - started}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"checkpoint error: {exc}") from exc


def evaluate(test: list[D.Sample], metrics: set[str], heatmaps=None, scores=None) -> tuple[dict, object]:
    """Metric dictionary for test samples given heatmaps and/or image scores."""
    result: dict = {"n_images": len(test)}
    curve = None
    if "pro" in metrics:
        masked = [(h, s.mask) for h, s in zip(heatmaps, test) if s.mask is not None]
        curve = pro_curve([h for h, _ in masked], [m for _, m in masked])
        result["pro_capped_auc"] = curve.capped_auc
    labels = [s.label for s in test]
    if "auc" in metrics:
        result["roc_auc"] = roc_auc(scores, labels)
    if "prauc" in metrics:
        result["pr_auc"] = pr_auc(scores, labels)
    return result, curve


def cmd_eval(args) -> int:
    try:
        spec = read_json(args.data)
        _, test = load_dataset(spec, Path(args.data).parent)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except (D.DataError, OSError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"dataset error: {exc}") from exc
    metrics = set(args.metric or [])
    has_masks = any(s.mask is not None and s.mask.any() for s in test)
    both = len({s.label for s in test}) == 2
    if not metrics:
        metrics = ({"pro"} if has_masks else set()) | ({"auc", "prauc"} if both else set())
    if "pro" in metrics and not has_masks:
        raise CliError(EXIT_DATA, "PRO requires ground-truth masks with at least one anomalous region")
    if metrics & {"auc", "prauc"} and not both:
        raise CliError(EXIT_DATA, "AUC metrics require both normal and anomalous images")

    scores = heatmaps = None
    if args.heatmaps:
        heatmaps = []
        for i in range(len(test)):
            p = Path(args.heatmaps) / f"{i:05d}.f32"
            try:
                heatmaps.append(read_float_grid(p).astype(np.float64))
            except (OSError, ValueError) as exc:
                raise CliError(EXIT_DATA, f"heatmap {p}: {exc}") from exc
            if heatmaps[-1].shape != test[i].image.shape[:2]:
                raise CliError(EXIT_DATA, f"heatmap {p} does not match image {test[i].image.shape[:2]}")
        if metrics & {"auc", "prauc"}:
            scores = [float(h.max()) for h in heatmaps]
    else:
        if not args.ckpt:
            raise CliError(EXIT_CONFIG, "eval needs --ckpt or --heatmaps")
        ckpt = _load_ckpt(args.ckpt)
        _check_shapes(test, ckpt.model_config)
        net = ckpt.network()
        r = score_samples(net, test, ckpt.normalizer)
        mc = ckpt.model_config
        heatmaps = [heatmap_from_patch_scores(p, (mc.grid_rows, mc.grid_cols),
                                              (mc.image_height, mc.image_width)).scores
                    for p in r["per_patch_nll"]]
        scores = r["score"]
    try:
        result, curve = evaluate(test, metrics, heatmaps, scores)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if curve is not None:
        with open(out / "pro_curve.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["fpr", "overlap"])
            for fpr, ov in curve.points:
                w.writerow([repr(float(fpr)), repr(float(ov))])
    return EXIT_OK


def cmd_heatmap(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    mc = ckpt.model_config
    if ckpt.normalizer is None:
        raise CliError(EXIT_DATA, "checkpoint carries no score normalization statistics")
    try:
        img = D.to_unit_range(D.read_pnm(args.image))
    except (D.DataError, OSError) as exc:
        raise CliError(EXIT_DATA, f"image error: {exc}") from exc
    if img.shape != (mc.image_height, mc.image_width, mc.channels):
        raise CliError(EXIT_DATA, f"image shape {img.shape} does not match checkpoint "
                                  f"({mc.image_height}, {mc.image_width}, {mc.channels})")
    net = ckpt.network()
    r = net.infer(img[None])
    hm = heatmap_from_patch_scores(r["per_patch_nll"][0], (mc.grid_rows, mc.grid_cols),
                                   (mc.image_height, mc.image_width))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm16(out, hm.scores)
    write_float_grid(out.with_suffix(".f32"), hm.scores)
    score = global_score((r["mse"][0], r["ssim"][0]), r["per_patch_nll"][0], ckpt.normalizer)
    print(repr(float(score)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtadl", description="Transformer anomaly detection and localization.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train on the normal images of a dataset")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", help="output directory")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="evaluate a checkpoint (or precomputed heatmaps) on a test split")
    e.add_argument("--ckpt")
    e.add_argument("--heatmaps", help="directory of NNNNN.f32 grids, one per test image")
    e.add_argument("--data", required=True, help="data spec JSON")
    e.add_argument("--out", required=True)
    e.add_argument("--metric", action="append", choices=["pro", "auc", "prauc"])
    e.set_defaults(func=cmd_eval)
    h = sub.add_parser("heatmap", help="write the anomaly heatmap of one PGM/PPM image")
    h.add_argument("--ckpt", required=True)
    h.add_argument("--image", required=True)
    h.add_argument("--out", required=True, help="output .pgm path; raw grid goes next to it as .f32")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
