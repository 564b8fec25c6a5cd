"""Adam training loop over the composite objective, inference helpers and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import Sample, batches, check_normal_only
from .losses import LossBreakdown, mse, ssim, total_loss
from .mdn import MixtureHead, nll, perturb_features
from .metrics import ScoreNormalizer, global_score
from .model import VTADL, EncodedPatches
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VTADLCK1"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def _philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


# -- optimizer ----------------------------------------------------------------
@dataclass
class OptimState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_train_config(cls, tc: TrainConfig) -> "OptimState":
        return cls(tc.lr, tc.weight_decay, tc.beta1, tc.beta2, tc.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimState) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(c2)
        denom += state.eps
        step = np.divide(m, denom, out=denom)
        step *= state.lr / c1
        p.data -= step.astype(p.dtype, copy=False)


# -- network bundle -------------------------------------------------------------
class Network:
    """Encoder/decoder plus mixture head, with helpers for losses and scoring."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.model = VTADL(config, _philox(seed, 10))
        self.head = MixtureHead(config, _philox(seed, 11))

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.model.params, **self.head.params}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self.model.buffers

    def loss(self, images: np.ndarray, noise_rng: np.random.Generator | None,
             training: bool = True) -> tuple[Tensor, LossBreakdown]:
        c = self.config
        imgs = np.asarray(images, dtype=c.dtype)
        recon, enc = self.model.forward(imgs, training=training)
        z = enc.features.detach() if c.mdn_detach else enc.features
        noisy = perturb_features(EncodedPatches(z, enc.grid_rows, enc.grid_cols), c.noise_std,
                                 noise_rng, training).features
        # the head is conditioned on the perturbed features; the target stays clean unless asked
        tgt = noisy if c.noise_on == "both" else z
        params = self.head.predict_params(noisy)
        _, nll_mean = nll(params, self.head.target(tgt))
        return total_loss(Tensor(imgs), recon, nll_mean, c.lambda1, c.lambda2, c.ssim_window)

    def infer(self, images: np.ndarray, batch_size: int = 32) -> dict[str, np.ndarray]:
        """Evaluation-mode pass: per-patch NLL, per-image MSE/SSIM and reconstructions."""
        c = self.config
        imgs = np.asarray(images, dtype=c.dtype)
        out = {"per_patch_nll": [], "mse": [], "ssim": [], "recon": []}
        with T.no_grad():
            for i in range(0, len(imgs), batch_size):
                x = imgs[i:i + batch_size]
                recon, enc = self.model.forward(x, training=False)
                params = self.head.predict_params(enc)
                per_patch, _ = nll(params, self.head.target(enc.features))
                out["per_patch_nll"].append(per_patch.data.astype(np.float64))
                out["mse"].append(mse(Tensor(x), recon, per_image=True).data.astype(np.float64))
                out["ssim"].append(ssim(Tensor(x), recon, window=c.ssim_window, per_image=True).data.astype(np.float64))
                out["recon"].append(recon.data)
        return {k: np.concatenate(v) for k, v in out.items()}

    def fit_normalizer(self, images: np.ndarray, alpha: float = 1.0) -> ScoreNormalizer:
        r = self.infer(images)
        return ScoreNormalizer.fit(r["mse"], r["ssim"], r["per_patch_nll"].max(axis=1), alpha)


# -- checkpoints ----------------------------------------------------------------
@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optim: OptimState
    epoch: int
    rng_state: dict
    normalizer: ScoreNormalizer | None = None
    version: int = CHECKPOINT_VERSION

    def network(self) -> Network:
        net = Network(self.model_config)
        for k, v in self.params.items():
            net.params[k].data = v.astype(self.model_config.dtype).copy()
        for k, v in self.buffers.items():
            net.buffers[k][...] = v
        return net


def _tensor_table(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    items += [(f"buffer/{k}", v) for k, v in ckpt.buffers.items()]
    items += [(f"adam.m/{k}", v) for k, v in ckpt.optim.m.items()]
    items += [(f"adam.v/{k}", v) for k, v in ckpt.optim.v.items()]
    return items


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """``VTADLCK1`` magic, uint64-LE manifest length, JSON manifest, float32-LE payloads."""
    entries, chunks, offset = [], [], 0
    for name, arr in _tensor_table(ckpt):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    o = ckpt.optim
    manifest = {
        "version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optim": {"t": o.t, "lr": o.lr, "weight_decay": o.weight_decay,
                  "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps},
        "normalizer": None if ckpt.normalizer is None else ckpt.normalizer.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + n:
        raise CheckpointError(f"{path}: manifest length mismatch")
    man = json.loads(raw[16:16 + n])
    if man.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {man.get('version')}")
    payload = raw[16 + n:]
    if len(payload) != man["payload_bytes"]:
        raise CheckpointError(f"{path}: payload length mismatch ({len(payload)} of {man['payload_bytes']} bytes)")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    for e in man["tensors"]:
        kind, name = e["name"].split("/", 1)
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        groups[kind][name] = arr.reshape(e["shape"]).astype(np.float32)
    mc = ModelConfig(**man["model_config"])
    o = man["optim"]
    optim = OptimState(o["lr"], o["weight_decay"], o["beta1"], o["beta2"], o["eps"], o["t"],
                       groups["adam.m"], groups["adam.v"])
    norm = man.get("normalizer")
    return Checkpoint(mc, TrainConfig(**man["train_config"]), groups["param"], groups["buffer"], optim,
                      man["epoch"], man["rng_state"], None if norm is None else ScoreNormalizer.from_dict(norm),
                      man["version"])


# -- training ---------------------------------------------------------------------
@dataclass
class EpochLog:
    epoch: int
    nll: float
    mse: float
    ssim: float
    total: float


class Trainer:
    """Mini-batch Adam over ``nll + lambda1*mse + lambda2*(1 - ssim)``.

    Batch order and feature noise come from Philox streams keyed by
    ``(seed, epoch[, batch])``, so a run resumed from a checkpoint replays the
    uninterrupted trajectory.
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, seed: int = 0,
                 checkpoint: Checkpoint | None = None):
        self.model_config = model_config
        self.train_config = train_config
        self.seed = seed
        self.epoch = 0
        self.normalizer: ScoreNormalizer | None = None
        if checkpoint is None:
            self.net = Network(model_config, seed)
            self.optim = OptimState.from_train_config(train_config)
        else:
            self.net = checkpoint.network()
            self.optim = checkpoint.optim
            self.epoch = checkpoint.epoch
            self.seed = int(checkpoint.rng_state["seed"])
            self.normalizer = checkpoint.normalizer
            for name in self.optim.m:
                self.optim.m[name] = self.optim.m[name].astype(model_config.dtype)
                self.optim.v[name] = self.optim.v[name].astype(model_config.dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Trainer":
        return cls(ckpt.model_config, ckpt.train_config, checkpoint=ckpt)

    def step(self, images: np.ndarray, noise_rng: np.random.Generator | None) -> LossBreakdown:
        params = self.net.params
        for p in params.values():
            p.grad = None
        loss, parts = self.net.loss(images, noise_rng, training=True)
        if not np.isfinite(parts.total):
            T.current_tape().clear()
            raise NumericError(f"non-finite loss {parts.total}")
        T.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, self.optim)
        return parts

    def run_epoch(self, images: np.ndarray) -> EpochLog:
        rows = []
        bs = self.train_config.batch_size
        for b, idx in enumerate(batches(len(images), bs, self.seed, self.epoch)):
            try:
                parts = self.step(images[idx], _philox(self.seed, 200, self.epoch, b))
            except NumericError as exc:
                raise NumericError(f"epoch {self.epoch}, batch {b}: {exc}") from exc
            rows.append((parts.nll, parts.mse, parts.ssim_value, parts.total, len(idx)))
        a = np.array(rows)
        w = a[:, 4] / a[:, 4].sum()
        mean = (a[:, :4] * w[:, None]).sum(axis=0)
        for name, p in self.net.params.items():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {name} became non-finite in epoch {self.epoch}")
        entry = EpochLog(self.epoch, *map(float, mean))
        self.epoch += 1
        return entry

    def fit(self, images: np.ndarray, epochs: int, callback: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
        out = []
        for _ in range(epochs):
            entry = self.run_epoch(images)
            log.info("epoch %d nll=%.4f mse=%.5f ssim=%.4f total=%.4f", entry.epoch, entry.nll,
                     entry.mse, entry.ssim, entry.total)
            out.append(entry)
            if callback:
                callback(entry)
        return out

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model_config, self.train_config,
                          {k: p.data.copy() for k, p in self.net.params.items()},
                          {k: v.copy() for k, v in self.net.buffers.items()},
                          OptimState(self.optim.lr, self.optim.weight_decay, self.optim.beta1, self.optim.beta2,
                                     self.optim.eps, self.optim.t,
                                     {k: v.copy() for k, v in self.optim.m.items()},
                                     {k: v.copy() for k, v in self.optim.v.items()}),
                          self.epoch, {"bit_generator": "Philox", "seed": self.seed, "epoch": self.epoch},
                          self.normalizer)


def split_validation(samples: Sequence[Sample], fraction: float, seed: int):
    n_val = int(round(len(samples) * fraction))
    order = _philox(seed, 300).permutation(len(samples))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Sequence[Sample],
          epochs: int | None = None, seed: int = 0,
          callback: Callable[[EpochLog], None] | None = None) -> tuple[Checkpoint, list[EpochLog]]:
    """Train on the normal-only split; score statistics come from a held-out slice of it."""
    check_normal_only(dataset)
    fit_set, val_set = split_validation(dataset, train_config.val_fraction, seed)
    trainer = Trainer(model_config, train_config, seed)
    history = trainer.fit(stack_images(fit_set), train_config.epochs if epochs is None else epochs, callback)
    trainer.normalizer = trainer.net.fit_normalizer(stack_images(val_set or fit_set))
    return trainer.checkpoint(), history


def score_samples(net: Network, samples: Sequence[Sample], normalizer: ScoreNormalizer) -> dict[str, np.ndarray]:
    """Per-image global scores plus the raw inference outputs."""
    r = net.infer(stack_images(samples))
    r["score"] = np.asarray(global_score((r["mse"], r["ssim"]), r["per_patch_nll"], normalizer))
    return r
