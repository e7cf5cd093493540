"""A seeded, randomly initialised vision transformer used as a stand-in backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import MLP, Param, attention_probs, ops, uniform_init

# pixels are centred before embedding so the shared DC component of every
# patch does not dominate the token directions
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass
class FeatureStack:
    """Per-layer patch tokens, ``layers`` shaped (L, N, C) on a (gh, gw) grid."""

    layers: np.ndarray
    grid: tuple

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        if self.layers.ndim != 3:
            raise DimensionError(f"feature stack must be (L, N, C), got {self.layers.shape}")
        if self.grid[0] * self.grid[1] != self.layers.shape[1]:
            raise DimensionError(f"{self.layers.shape[1]} tokens do not fill grid {self.grid}")

    @property
    def depth(self):
        return self.layers.shape[0]

    @property
    def n_tokens(self):
        return self.layers.shape[1]

    @property
    def dim(self):
        return self.layers.shape[2]


def patchify(images, p):
    """(…, H, W) → (…, N, p²) in row-major patch order."""
    images = np.asarray(images, dtype=np.float64)
    *lead, h, w = images.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, gh, p, gw, p)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, gh * gw, p * p), (gh, gw)


class Block:
    """Pre-norm transformer block with multi-head attention and a GELU MLP."""

    def __init__(self, dim, heads, rng, name, trainable=False, mlp_ratio=2):
        self.dim, self.heads = dim, heads
        self.wq = Param(uniform_init(rng, dim, (dim, dim)), f"{name}.wq", trainable)
        self.wk = Param(uniform_init(rng, dim, (dim, dim)), f"{name}.wk", trainable)
        self.wv = Param(uniform_init(rng, dim, (dim, dim)), f"{name}.wv", trainable)
        self.wo = Param(uniform_init(rng, dim, (dim, dim)), f"{name}.wo", trainable)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, f"{name}.mlp", trainable)

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo] + self.mlp.params()

    def copy(self, name, trainable):
        new = object.__new__(Block)
        new.dim, new.heads = self.dim, self.heads
        for attr in ("wq", "wk", "wv", "wo"):
            setattr(new, attr, Param(getattr(self, attr).data, f"{name}.{attr}", trainable))
        new.mlp = object.__new__(MLP)
        new.mlp.dim = self.mlp.dim
        for attr in ("w1", "b1", "w2", "b2"):
            setattr(new.mlp, attr, Param(getattr(self.mlp, attr).data, f"{name}.mlp.{attr}", trainable))
        return new

    def _split(self, x):
        lead = x.shape[:-1]
        x = ops.reshape(x, lead + (self.heads, self.dim // self.heads))
        return ops.swapaxes(x, -2, -3)

    def __call__(self, x, bias=None):
        """Apply the block; ``bias`` (…, T) is added to every head's logits.

        Returns the new tokens and the attention weights (…, heads, T, T).
        """
        h = ops.layer_norm(x)
        q, k, v = (self._split(ops.matmul(h, w)) for w in (self.wq, self.wk, self.wv))
        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64)[..., None, None, :]
        probs = attention_probs(q, k, bias)
        a = ops.swapaxes(ops.matmul(probs, v), -2, -3)
        a = ops.reshape(a, a.shape[:-2] + (self.dim,))
        x = ops.add(x, ops.matmul(a, self.wo))
        m = self.mlp
        h = ops.layer_norm(x)
        delta = ops.add(ops.matmul(ops.gelu(ops.add(ops.matmul(h, m.w1), m.b1)), m.w2), m.b2)
        return ops.add(x, delta), probs


class ToyViT:
    """Linear patch embedding followed by ``depth`` frozen random blocks.

    No positional embedding is used, so identical patches map to identical
    tokens at the embedding layer.
    """

    def __init__(self, patch=14, dim=64, depth=3, heads=4, seed=0, cls_token=False):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        self.patch, self.dim, self.heads, self.seed = patch, dim, heads, seed
        self.embed_w = Param(uniform_init(rng, patch * patch, (patch * patch, dim)), "embed.w", False)
        self.embed_b = Param(uniform_init(rng, patch * patch, (dim,)), "embed.b", False)
        self.cls = Param(rng.normal(0, 1, size=dim), "cls", False) if cls_token else None
        self.blocks = [Block(dim, heads, rng, f"block{i}") for i in range(depth)]

    @property
    def depth(self):
        return len(self.blocks)

    def params(self):
        ps = [self.embed_w, self.embed_b] + ([self.cls] if self.cls is not None else [])
        for b in self.blocks:
            ps += b.params()
        return ps

    def embed(self, images):
        """(…, H, W) pixels in [0, 1] → (…, N[+1], C) tokens and the patch grid."""
        patches, grid = patchify((np.asarray(images, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD,
                                 self.patch)
        x = ops.add(ops.matmul(patches, self.embed_w), self.embed_b)
        if self.cls is not None:
            cls = np.broadcast_to(self.cls.data, x.shape[:-2] + (1, self.dim))
            x = ops.concat([cls, x], axis=-2)
        return x, grid

    def features(self, image):
        """Layer-normalised outputs of every block for one image."""
        x, grid = self.embed(image)
        layers = []
        for block in self.blocks:
            x, _ = block(x)
            layers.append(ops.layer_norm(x).data)
        return FeatureStack(np.stack(layers), grid)

    def features_batch(self, images):
        """(B, H, W) → array (B, L, N, C)."""
        x, grid = self.embed(images)
        layers = []
        for block in self.blocks:
            x, _ = block(x)
            layers.append(ops.layer_norm(x).data)
        return np.stack(layers, axis=1), grid
