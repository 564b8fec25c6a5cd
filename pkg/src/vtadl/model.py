"""Patch transformer encoder with a transposed-convolution decoder.

Images travel as ``[B, H, W, C]`` arrays; decoder internals use NCHW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import ShapeError, Tensor


@dataclass
class PatchGrid:
    patches: np.ndarray  # [..., N, P*P*C], raster order
    grid_rows: int
    grid_cols: int
    patch_size: int
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class EncodedPatches:
    features: Tensor  # [..., N, D]; row i is grid cell (i // grid_cols, i % grid_cols)
    grid_rows: int
    grid_cols: int


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split ``[H, W, C]`` (or ``[B, H, W, C]``) images into flattened raster-order patches."""
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise ShapeError(f"expected [H, W, C] or [B, H, W, C] image, got shape {np.shape(image)}")
    b, h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = (img.reshape(b, rows, p, cols, p, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(b, rows * cols, p * p * c))
    if single:
        patches = patches[0]
    return PatchGrid(patches, rows, cols, p, c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    x = grid.patches
    single = x.ndim == 2
    if single:
        x = x[None]
    p, c = grid.patch_size, grid.channels
    b = x.shape[0]
    img = (x.reshape(b, grid.grid_rows, grid.grid_cols, p, p, c)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(b, grid.grid_rows * p, grid.grid_cols * p, c))
    return img[0] if single else img


def embed(patches, E: Tensor, E_pos: Tensor) -> Tensor:
    """Linear patch embedding plus positional embedding: ``patches @ E + E_pos``."""
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=E.dtype))
    if x.shape[-1] != E.shape[0] or x.shape[-2] != E_pos.shape[0] or E.shape[1] != E_pos.shape[1]:
        raise ShapeError(f"embedding shapes do not conform: patches {x.shape}, E {E.shape}, E_pos {E_pos.shape}")
    return T.matmul(x, E) + E_pos


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, W)
    return y if b is None else y + b


def msa(z: Tensor, heads: int, weights: dict[str, Tensor], return_attention: bool = False):
    """Multi-head scaled dot-product self-attention over the token axis.

    ``weights`` holds ``q.W, q.b, k.W, k.b, v.W, v.b, o.W, o.b``.
    """
    *lead, n, d = z.shape
    if d % heads:
        raise ShapeError(f"embedding dim {d} not divisible by {heads} heads")
    dh = d // heads
    z3 = z.reshape(-1, n, d)
    b = z3.shape[0]

    def split(name):
        t = linear(z3, weights[f"{name}.W"], weights[f"{name}.b"])
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = linear(ctx, weights["o.W"], weights["o.b"]).reshape(*lead, n, d)
    if return_attention:
        return out, attn.data.reshape(*lead, heads, n, n)
    return out


def encoder_block(z: Tensor, heads: int, weights: dict[str, Tensor]) -> Tensor:
    """Pre-norm residual block: ``z + MSA(LN(z))`` then ``+ MLP(LN(.))``."""
    attn_w = {k[4:]: v for k, v in weights.items() if k.startswith("msa.")}
    z = z + msa(T.layer_norm(z, weights["ln1.gamma"], weights["ln1.beta"]), heads, attn_w)
    h = T.layer_norm(z, weights["ln2.gamma"], weights["ln2.beta"])
    h = T.activation("gelu", linear(h, weights["mlp1.W"], weights["mlp1.b"]))
    return z + linear(h, weights["mlp2.W"], weights["mlp2.b"])


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class VTADL:
    """Encoder/decoder network; the mixture head lives in :mod:`vtadl.mdn`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        self.config = config
        rng = rng if isinstance(rng, np.random.Generator) else np.random.Generator(np.random.Philox(rng))
        dt = np.dtype(config.dtype)
        c = config
        D, N = c.embed_dim, c.num_patches
        p: dict[str, np.ndarray] = {}
        p["embed.E"] = _uniform(rng, c.patch_dim, (c.patch_dim, D), dt)
        # no class token: one positional row per patch
        p["embed.pos"] = (0.02 * rng.standard_normal((N, D))).astype(dt)
        hidden = c.mlp_ratio * D
        for l in range(c.depth):
            pre = f"blocks.{l}."
            p[pre + "ln1.gamma"] = np.ones(D, dt)
            p[pre + "ln1.beta"] = np.zeros(D, dt)
            for name in "qkvo":
                p[pre + f"msa.{name}.W"] = _uniform(rng, D, (D, D), dt)
                p[pre + f"msa.{name}.b"] = np.zeros(D, dt)
            p[pre + "ln2.gamma"] = np.ones(D, dt)
            p[pre + "ln2.beta"] = np.zeros(D, dt)
            p[pre + "mlp1.W"] = _uniform(rng, D, (D, hidden), dt)
            p[pre + "mlp1.b"] = np.zeros(hidden, dt)
            p[pre + "mlp2.W"] = _uniform(rng, hidden, (hidden, D), dt)
            p[pre + "mlp2.b"] = np.zeros(D, dt)
        p["proj.W"] = _uniform(rng, N * D, (N * D, c.recon_dim), dt)
        widths = (c.seed_shape[0],) + c.decoder_channels + (c.channels,)
        self.buffers: dict[str, np.ndarray] = {}
        k = 4
        for s in range(c.decoder_stages):
            cin, cout = widths[s], widths[s + 1]
            p[f"dec.{s}.W"] = _uniform(rng, cout * k * k, (cin, cout, k, k), dt)
            p[f"dec.{s}.b"] = np.zeros(cout, dt)
            if s < c.decoder_stages - 1:
                p[f"dec.{s}.bn.gamma"] = np.ones(cout, dt)
                p[f"dec.{s}.bn.beta"] = np.zeros(cout, dt)
                self.buffers[f"dec.{s}.bn.mean"] = np.zeros(cout, dt)
                self.buffers[f"dec.{s}.bn.var"] = np.ones(cout, dt)
        self.params = {name: Tensor(v, requires_grad=True) for name, v in p.items()}

    def block_weights(self, l: int) -> dict[str, Tensor]:
        pre = f"blocks.{l}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def encode(self, images) -> EncodedPatches:
        c = self.config
        imgs = np.asarray(images, dtype=c.dtype)
        if imgs.shape[-3:] != (c.image_height, c.image_width, c.channels):
            raise ShapeError(f"image shape {imgs.shape} does not match config "
                             f"({c.image_height}, {c.image_width}, {c.channels})")
        grid = patchify(imgs, c.patch_size)
        z = embed(grid.patches, self.params["embed.E"], self.params["embed.pos"])
        for l in range(c.depth):
            z = encoder_block(z, c.num_heads, self.block_weights(l))
        return EncodedPatches(z, grid.grid_rows, grid.grid_cols)

    def project_reconstruction(self, encoded: EncodedPatches) -> Tensor:
        """Flatten the encoded patches and apply the bias-free learned projection."""
        z = encoded.features
        flat = z.reshape(*z.shape[:-2], z.shape[-2] * z.shape[-1])
        return T.matmul(flat if flat.ndim > 1 else flat.reshape(1, -1), self.params["proj.W"]).reshape(
            *z.shape[:-2], self.config.recon_dim)

    def decode(self, v: Tensor, training: bool = True) -> Tensor:
        c = self.config
        single = v.ndim == 1
        x = v.reshape(-1, *c.seed_shape)
        for s in range(c.decoder_stages):
            x = T.conv_transpose2d(x, self.params[f"dec.{s}.W"], self.params[f"dec.{s}.b"], stride=2, padding=1)
            if s < c.decoder_stages - 1:
                x = T.batch_norm(x, self.params[f"dec.{s}.bn.gamma"], self.params[f"dec.{s}.bn.beta"],
                                 self.buffers[f"dec.{s}.bn.mean"], self.buffers[f"dec.{s}.bn.var"],
                                 training=training)
                x = T.activation("relu", x)
            else:
                x = T.activation("tanh", x)
        x = x.transpose(0, 2, 3, 1)
        return x.reshape(c.image_height, c.image_width, c.channels) if single else x

    def forward(self, images, training: bool = True) -> tuple[Tensor, EncodedPatches]:
        imgs = np.asarray(images)
        single = imgs.ndim == 3
        encoded = self.encode(imgs[None] if single else imgs)
        recon = self.decode(self.project_reconstruction(encoded), training=training)
        if single:
            recon = recon.reshape(*recon.shape[1:])
            f = encoded.features
            encoded = EncodedPatches(f.reshape(*f.shape[1:]), encoded.grid_rows, encoded.grid_cols)
        return recon, encoded
