"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance suite.

Two recipes:

* ``synthetic_run``: train on seeded grating textures, report PRO on held-out
  defect images.
* ``mnist_run``: one-class MNIST (one digit normal), report image-level ROC-AUC
  of the global score and of the reconstruction error alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, desk_scale
from .data import NORMAL, SyntheticConfig, generate_synthetic, load_idx, pad_to
from .metrics import heatmap_from_patch_scores, pro_score, roc_auc
from .trainer import EpochLog, Trainer, score_samples, split_validation, stack_images


@dataclass
class RunResult:
    metrics: dict[str, float]
    history: list[EpochLog] = field(default_factory=list)
    seconds: float = 0.0


def synthetic_model(**overrides) -> ModelConfig:
    """64x64 grayscale, P=8, D=64, two blocks, four heads, K=16 unless overridden."""
    return desk_scale(**overrides)


def synthetic_run(seed: int = 0, mixture_components: int = 16, noise_std: float = 0.2, epochs: int = 30,
                  n_train: int = 200, n_test: int = 100, lr: float = 1e-3, batch_size: int = 8,
                  log_every: int = 0, **model_overrides) -> RunResult:
    """Train on normal textures and score PRO (30% FPR cap) on ``n_test`` defect images."""
    started = time.time()
    cfg = synthetic_model(mixture_components=mixture_components, noise_std=noise_std, **model_overrides)
    data_cfg = SyntheticConfig(height=cfg.image_height, width=cfg.image_width, channels=cfg.channels,
                               n_train=n_train, n_test_normal=0, n_test_anomalous=n_test, seed=seed)
    train, test = generate_synthetic(data_cfg)
    trainer = Trainer(cfg, TrainConfig(lr=lr, batch_size=batch_size, epochs=epochs), seed)
    images = stack_images(train)
    history = []
    for e in range(epochs):
        history.append(trainer.run_epoch(images))
        if log_every and (e + 1) % log_every == 0:
            print(f"  epoch {e + 1}/{epochs} total={history[-1].total:.4f} "
                  f"pro={_pro(trainer, cfg, test):.4f}", flush=True)
    return RunResult({"pro": _pro(trainer, cfg, test)}, history, time.time() - started)


def _pro(trainer: Trainer, cfg: ModelConfig, test) -> float:
    r = trainer.net.infer(stack_images(test))
    maps = [heatmap_from_patch_scores(p, (cfg.grid_rows, cfg.grid_cols), (cfg.image_height, cfg.image_width))
            for p in r["per_patch_nll"]]
    return pro_score(maps, [s.mask for s in test])


def mnist_model(**overrides) -> ModelConfig:
    base = dict(image_height=32, image_width=32, channels=1, patch_size=8, embed_dim=64, depth=2, num_heads=4,
                mixture_components=10)
    base.update(overrides)
    return ModelConfig(**base)


def mnist_run(data_dir, digit: int = 1, epochs: int = 5, max_train: int = 2000, n_test_each: int = 500,
              seed: int = 0, lr: float = 1e-3, batch_size: int = 8, log_every: int = 0,
              **model_overrides) -> RunResult:
    """One-class run: train on ``digit`` only, test on a balanced set of that digit and all others."""
    started = time.time()
    data_dir = Path(data_dir)
    cfg = mnist_model(**model_overrides)

    def prep(samples):
        for s in samples:
            s.image = pad_to(s.image, cfg.image_height, cfg.image_width)
        return samples

    train = [s for s in load_idx(data_dir / "train-images-idx3-ubyte.gz", data_dir / "train-labels-idx1-ubyte.gz",
                                 digit) if s.label == NORMAL][:max_train]
    test_all = load_idx(data_dir / "t10k-images-idx3-ubyte.gz", data_dir / "t10k-labels-idx1-ubyte.gz", digit)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    test = []
    for label in (0, 1):
        pool = [s for s in test_all if s.label == label]
        pick = np.sort(rng.permutation(len(pool))[:n_test_each])
        test += [pool[i] for i in pick]
    train, test = prep(train), prep(test)

    tc = TrainConfig(lr=lr, batch_size=batch_size, epochs=epochs)
    fit, val = split_validation(train, tc.val_fraction, seed)
    trainer = Trainer(cfg, tc, seed)
    images = stack_images(fit)
    history = []
    for e in range(epochs):
        history.append(trainer.run_epoch(images))
        if log_every and (e + 1) % log_every == 0:
            print(f"  epoch {e + 1}/{epochs} total={history[-1].total:.4f}", flush=True)
    normalizer = trainer.net.fit_normalizer(stack_images(val))
    r = score_samples(trainer.net, test, normalizer)
    labels = [s.label for s in test]
    metrics = {
        "roc_auc": roc_auc(r["score"], labels),
        "roc_auc_mse": roc_auc(r["mse"], labels),
        "roc_auc_max_nll": roc_auc(r["per_patch_nll"].max(axis=1), labels),
        "n_train": len(fit),
        "n_test": len(test),
    }
    return RunResult(metrics, history, time.time() - started)
