"""A tiny Vision Transformer with an MAE-style encoder/decoder split.

Forward functions take ``p``, a mapping from parameter name to either a
numpy array or a :class:`~mimscape.tensor.Tensor` leaf. Passing arrays runs
a plain numpy forward; passing tape leaves records the graph for backward.

Batched shapes used throughout:

* patches ``(B, N, P*P*C)``
* visible / masked indices ``(B, V)`` / ``(B, M)``, sorted per row
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import ContractError, DimensionError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 1
    embed_dim: int = 32
    decoder_dim: int = 16
    heads: int = 4
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 8

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image size {self.image_size} is not a multiple of patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ContractError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.decoder_dim % self.decoder_heads:
            raise ContractError(f"decoder dim {self.decoder_dim} not divisible by {self.decoder_heads} heads")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ContractError("sin-cos positional embeddings need dims divisible by 4")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViTConfig":
        return cls(**d)


# -- patches -----------------------------------------------------------------

def patchify(image: np.ndarray, config: ViTConfig) -> np.ndarray:
    """(C, H, W) image -> (N, P*P*C) patches in raster order, pixel-major within a patch."""
    image = np.asarray(image, dtype=np.float64)
    expected = (config.channels, config.image_size, config.image_size)
    if image.shape != expected:
        raise DimensionError(f"patchify: image shape {image.shape}, config expects {expected}")
    return patchify_batch(image[None], config)[0]


def patchify_batch(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    if (c, h, w) != (config.channels, config.image_size, config.image_size):
        raise DimensionError(f"patchify: images {images.shape} do not match config")
    p, g = config.patch_size, config.grid_size
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * c))


def unpatchify(patches: np.ndarray, config: ViTConfig) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (config.num_patches, config.patch_dim):
        raise DimensionError(f"unpatchify: patches {patches.shape} do not match config")
    p, g, c = config.patch_size, config.grid_size, config.channels
    x = patches.reshape(g, g, p, p, c).transpose(4, 0, 2, 1, 3)
    return np.ascontiguousarray(x.reshape(c, g * p, g * p))


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine positional table of shape (grid*grid, dim)."""
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))

    def one_axis(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([one_axis(gy), one_axis(gx)], axis=1)


# -- parameters ----------------------------------------------------------------

def _block_shapes(prefix: str, dim: int, mlp_ratio: float) -> list[tuple[str, tuple[int, ...]]]:
    hidden = int(round(dim * mlp_ratio))
    return [
        (f"{prefix}.norm1.weight", (dim,)),
        (f"{prefix}.norm1.bias", (dim,)),
        (f"{prefix}.attn.qkv.weight", (3 * dim, dim)),
        (f"{prefix}.attn.qkv.bias", (3 * dim,)),
        (f"{prefix}.attn.proj.weight", (dim, dim)),
        (f"{prefix}.attn.proj.bias", (dim,)),
        (f"{prefix}.norm2.weight", (dim,)),
        (f"{prefix}.norm2.bias", (dim,)),
        (f"{prefix}.mlp.fc1.weight", (hidden, dim)),
        (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (dim, hidden)),
        (f"{prefix}.mlp.fc2.bias", (dim,)),
    ]


def parameter_shapes(config: ViTConfig) -> dict[str, list[tuple[str, tuple[int, ...]]]]:
    """Parameter names and shapes, grouped into encoder / decoder / head."""
    e, d = config.embed_dim, config.decoder_dim
    encoder = [("patch_embed.weight", (e, config.patch_dim)), ("patch_embed.bias", (e,))]
    for i in range(config.encoder_depth):
        encoder += _block_shapes(f"blocks.{i}", e, config.mlp_ratio)
    encoder += [("norm.weight", (e,)), ("norm.bias", (e,))]

    decoder = [("decoder_embed.weight", (d, e)), ("decoder_embed.bias", (d,)), ("mask_token", (d,))]
    for i in range(config.decoder_depth):
        decoder += _block_shapes(f"decoder_blocks.{i}", d, config.mlp_ratio)
    if config.decoder_depth:
        decoder += [("decoder_norm.weight", (d,)), ("decoder_norm.bias", (d,))]
    decoder += [("decoder_pred.weight", (config.patch_dim, d)), ("decoder_pred.bias", (config.patch_dim,))]

    head = [("head.weight", (config.num_classes, e)), ("head.bias", (config.num_classes,))]
    return {"encoder": encoder, "decoder": decoder, "head": head}


def group_names(config: ViTConfig, *groups: str) -> list[str]:
    shapes = parameter_shapes(config)
    return [name for g in groups for name, _ in shapes[g]]


def init_params(config: ViTConfig, rng: np.random.Generator) -> ParameterSet:
    params = ParameterSet()
    for group in parameter_shapes(config).values():
        for name, shape in group:
            if name == "mask_token":
                params[name] = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith(".bias"):
                params[name] = np.zeros(shape)
            elif "norm" in name:
                params[name] = np.ones(shape)
            elif name == "head.weight":
                params[name] = rng.normal(0.0, 0.02, size=shape)
            else:
                fan_out, fan_in = shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-limit, limit, size=shape)
    return params


@dataclass
class ViTModel:
    config: ViTConfig
    params: ParameterSet

    @classmethod
    def create(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        """Fresh model; initialisation draws from the run's ``init`` RNG stream."""
        from .rng import stream

        return cls(config, init_params(config, stream(seed, "init")))

    def names(self, *groups: str) -> list[str]:
        return group_names(self.config, *groups)

    def check(self) -> None:
        expected = {name: shape for group in parameter_shapes(self.config).values() for name, shape in group}
        if list(expected) != list(self.params):
            missing = [k for k in expected if k not in self.params]
            extra = [k for k in self.params if k not in expected]
            raise ContractError(f"parameter names disagree with config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name}: shape {self.params[name].shape}, config expects {shape}")


# -- forward -------------------------------------------------------------------

def self_attention(p: Mapping, prefix: str, x, heads: int, return_weights: bool = False):
    b, t, dim = x.shape
    dh = dim // heads
    qkv = T.linear(x, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = T.getitem(qkv, 0), T.getitem(qkv, 1), T.getitem(qkv, 2)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, dim))
    out = T.linear(out, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"])
    return (out, attn) if return_weights else out


def _block(p: Mapping, prefix: str, x, heads: int):
    h = T.layer_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"])
    x = T.add(x, self_attention(p, f"{prefix}.attn", h, heads))
    h = T.layer_norm(x, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"])
    h = T.gelu(T.linear(h, p[f"{prefix}.mlp.fc1.weight"], p[f"{prefix}.mlp.fc1.bias"]))
    return T.add(x, T.linear(h, p[f"{prefix}.mlp.fc2.weight"], p[f"{prefix}.mlp.fc2.bias"]))


def _check_indices(idx: np.ndarray, batch: int, n: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != batch:
        raise DimensionError(f"{what} indices have shape {idx.shape}, expected ({batch}, k)")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"{what} indices must lie in [0, {n})")
    return idx


def encoder_forward(p: Mapping, config: ViTConfig, patches: np.ndarray, visible: np.ndarray | None = None):
    """Encode the visible patches of each image; returns (B, V, embed_dim).

    Masked patches are dropped before the patch embedding so their pixel
    values cannot influence the result.
    """
    patches = np.asarray(patches, dtype=np.float64)
    b, n, _ = patches.shape
    pos = sincos_pos_embed(config.embed_dim, config.grid_size)
    if visible is None:
        x = T.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
        x = T.add(x, pos)
    else:
        visible = _check_indices(visible, b, n, "visible")
        if visible.shape[1] == 0:
            raise ContractError("encoder needs at least one visible patch")
        rows = np.arange(b)[:, None]
        x = T.linear(patches[rows, visible], p["patch_embed.weight"], p["patch_embed.bias"])
        x = T.add(x, pos[visible])
    for i in range(config.encoder_depth):
        x = _block(p, f"blocks.{i}", x, config.heads)
    return T.layer_norm(x, p["norm.weight"], p["norm.bias"])


def decoder_forward(p: Mapping, config: ViTConfig, latent, visible: np.ndarray, masked: np.ndarray):
    """Predict all N patches from visible-token latents plus mask tokens."""
    b, v, _ = latent.shape
    n = config.num_patches
    visible = _check_indices(visible, b, n, "visible")
    masked = _check_indices(masked, b, n, "masked")
    if visible.shape[1] != v:
        raise ContractError(f"latent has {v} tokens but mask lists {visible.shape[1]} visible patches")
    if v + masked.shape[1] != n:
        raise ContractError(f"visible ({v}) + masked ({masked.shape[1]}) != {n} patches")
    d = config.decoder_dim
    x = T.linear(latent, p["decoder_embed.weight"], p["decoder_embed.bias"])
    if masked.shape[1]:
        tokens = T.expand(p["mask_token"], (b, masked.shape[1], d))
        x = T.concat([x, tokens], axis=1)
    restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1, kind="stable")
    x = T.take_rows(x, restore)
    x = T.add(x, sincos_pos_embed(d, config.grid_size))
    for i in range(config.decoder_depth):
        x = _block(p, f"decoder_blocks.{i}", x, config.decoder_heads)
    if config.decoder_depth:
        x = T.layer_norm(x, p["decoder_norm.weight"], p["decoder_norm.bias"])
    return T.linear(x, p["decoder_pred.weight"], p["decoder_pred.bias"])


def pooled_features(p: Mapping, config: ViTConfig, patches: np.ndarray):
    """Global-average-pooled encoder tokens over the full patch sequence, (B, embed_dim)."""
    return T.mean(encoder_forward(p, config, patches), axis=1)


def head_logits(p: Mapping, features):
    return T.linear(features, p["head.weight"], p["head.bias"])


def classify_batch(p: Mapping, config: ViTConfig, patches: np.ndarray):
    return head_logits(p, pooled_features(p, config, patches))


# -- single-image conveniences ----------------------------------------------------

def encode(model: ViTModel, patches: np.ndarray, mask) -> np.ndarray:
    """Latent tokens ``z`` for one image's visible patches (``mask.visible``)."""
    visible = np.asarray(mask.visible, dtype=np.intp)[None]
    return encoder_forward(model.params, model.config, np.asarray(patches)[None], visible).data[0]


def decode(model: ViTModel, latent: np.ndarray, mask) -> np.ndarray:
    visible = np.asarray(mask.visible, dtype=np.intp)[None]
    masked = np.asarray(mask.masked, dtype=np.intp)[None]
    return decoder_forward(model.params, model.config, T.Tensor(np.asarray(latent)[None]), visible, masked).data[0]


def classify(model: ViTModel, patches: np.ndarray) -> np.ndarray:
    return classify_batch(model.params, model.config, np.asarray(patches)[None]).data[0]
