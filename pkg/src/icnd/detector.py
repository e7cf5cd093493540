"""Defect detection by reconstructing patch features from per-image normal tokens.

The pipeline per image: a frozen backbone produces L layers of patch tokens;
their sum ``F`` is compressed into M normal tokens by a cross-attention
extractor; a decoder whose keys and values are only those normal tokens
rebuilds each layer; the per-patch cosine residual is the defect score.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .checkpoint import load_checkpoint, save_checkpoint
from .data import mask_token_batch
from .errors import DimensionError, InvalidInputError, TrainingDivergenceError, UsageError
from .numerics import (
    MLP,
    AdamW,
    Param,
    attention,
    cosine_distance,
    grad_scale,
    mlp_forward,
    ops,
    pairwise_cosine_distance,
    relu_attention,
    uniform_init,
)
from .pgm import read_pgm16, write_pgm16
from .vit import FeatureStack, ToyViT

log = logging.getLogger(__name__)

U_FLOOR = 1e-8


@dataclass
class DetectorHyper:
    gamma: float = 3.0
    lam: float = 20.0
    n_tokens: int = 6
    dim: int = 64
    depth: int = 3
    heads: int = 4
    patch: int = 14
    backbone_seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 8
    mask_ratio: float = 0.1
    steps: int = 1000
    smooth_sigma: float = 4.0
    query_norm: bool = True
    identity_init: bool = True
    warmup: int = 50
    aug_shifts: int = 3

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise InvalidInputError("gamma and lambda must be nonnegative")
        if self.n_tokens < 1:
            raise InvalidInputError("need at least one normal token")


class DetectorModel:
    """Frozen backbone plus the trainable extractor and decoder."""

    def __init__(self, hyper=None, seed=0):
        self.hyper = hyper or DetectorHyper()
        h = self.hyper
        self.backbone = ToyViT(h.patch, h.dim, h.depth, h.heads, seed=h.backbone_seed)
        rng = np.random.default_rng(seed)
        c = h.dim
        self.tokens = Param(rng.normal(0.0, 1.0, size=(h.n_tokens, c)), "ni.tokens")
        self.ni_wq = Param(uniform_init(rng, c, (c, c)), "ni.wq")
        self.ni_wk = Param(uniform_init(rng, c, (c, c)), "ni.wk")
        self.ni_wv = Param(uniform_init(rng, c, (c, c)), "ni.wv")
        self.ni_mlp = MLP(c, 2 * c, rng, "ni.mlp")
        self.dec = []
        for i in range(h.depth):
            self.dec.append({
                "wq": Param(uniform_init(rng, c, (c, c)), f"dec{i}.wq"),
                "wk": Param(uniform_init(rng, c, (c, c)), f"dec{i}.wk"),
                "wv": Param(uniform_init(rng, c, (c, c)), f"dec{i}.wv"),
                "mlp": MLP(c, 2 * c, rng, f"dec{i}.mlp"),
            })
            # a nonzero output bias keeps queries whose ReLU scores all vanish
            # away from the zero vector, where cosine distance is undefined
            self.dec[-1]["mlp"].b2.data = rng.normal(0.0, 1.0, size=c)
        if h.identity_init:
            eye = np.eye(c)
            self.ni_wv.data = self.ni_wv.data * 0.1 + eye
            for layer in self.dec:
                for key in ("wq", "wk", "wv"):
                    layer[key].data = layer[key].data * 0.1 + eye
                layer["mlp"].w2.data *= 0.1
            self.ni_mlp.w2.data *= 0.1
        self.trained = False

    def params(self):
        """Trainable parameters, in a fixed order."""
        ps = [self.tokens, self.ni_wq, self.ni_wk, self.ni_wv] + self.ni_mlp.params()
        for layer in self.dec:
            ps += [layer["wq"], layer["wk"], layer["wv"]] + layer["mlp"].params()
        return ps

    def all_params(self):
        return self.backbone.params() + self.params()

    def state(self):
        return {p.name: p.data for p in self.all_params()}


def backbone_features(model, image):
    """Per-layer patch tokens of one image from the frozen backbone."""
    return model.backbone.features(image)


def aggregate(features):
    """Sum over layers: a FeatureStack gives N×C, a (…, L, N, C) array gives (…, N, C)."""
    layers = features.layers if isinstance(features, FeatureStack) else np.asarray(features)
    if layers.shape[-3] == 0:
        raise InvalidInputError("empty feature stack")
    return layers.sum(axis=-3)


def ni_extract(model, F):
    """Compress ``F`` (…, N, C) into normal tokens (…, M, C)."""
    F = ops.lift(F)
    c = model.tokens.shape[-1]
    if F.shape[-1] != c:
        raise DimensionError(f"feature width {F.shape[-1]} != token width {c}")
    q = ops.matmul(model.tokens, model.ni_wq)
    k = ops.matmul(F, model.ni_wk)
    v = ops.matmul(F, model.ni_wv)
    if F.ndim > 2:
        q = ops.add(q, np.zeros(F.shape[:-2] + q.shape))  # broadcast over the batch
    x = ops.add(attention(q, k, v), model.tokens)
    return mlp_forward(x, model.ni_mlp.params())


def normal_loss(F, tokens, token_mask):
    """Pull normal rows towards their nearest token, push masked rows away.

    ``F`` is (…, N, C), ``tokens`` (…, M, C) and ``token_mask`` (…, N) with
    True marking pseudo-abnormal rows. Leading axes are averaged.
    """
    token_mask = np.asarray(token_mask, dtype=bool)
    F = ops.lift(F)
    if token_mask.shape != F.shape[:-1]:
        raise DimensionError(f"mask shape {token_mask.shape} != feature rows {F.shape[:-1]}")
    n_abn = token_mask.sum(axis=-1, keepdims=True)
    n_norm = (~token_mask).sum(axis=-1, keepdims=True)
    if np.any(n_abn == 0) or np.any(n_norm == 0):
        raise InvalidInputError("token mask must contain both normal and abnormal rows")
    d = ops.amin(pairwise_cosine_distance(F, tokens), axis=-1)
    w_norm = (~token_mask) / n_norm
    w_abn = token_mask / n_abn
    per_sample = ops.add(ops.sum(ops.mul(d, w_norm - w_abn), axis=-1), 1.0)
    return ops.mean(per_sample)


def nig_decode(model, F, tokens):
    """Rebuild every backbone layer from normal tokens; returns a list of (…, N, C)."""
    out = []
    x = ops.lift(F)
    for layer in model.dec:
        q = ops.matmul(ops.layer_norm(x) if model.hyper.query_norm else x, layer["wq"])
        k = ops.matmul(tokens, layer["wk"])
        v = ops.matmul(tokens, layer["wv"])
        x = mlp_forward(relu_attention(q, k, v), layer["mlp"].params())
        out.append(x)
    return out


def position_weights(encoder, decoder, gamma):
    """Per-position weights ``(M / u)^γ`` with ``u`` the layer's batch-mean residual."""
    dist = cosine_distance(encoder, decoder).data
    u = max(float(dist.mean()), U_FLOOR)
    return (np.maximum(dist, 0.0) / u) ** gamma


def reconstruction_loss(encoder, decoder, gamma):
    """Layer mean of the flattened cosine distance, gradients reweighted by position.

    ``encoder`` is a sequence (or leading-L array) of per-layer targets and
    ``decoder`` the matching sequence of Tensors, each (…, N, C). The
    position weights only rescale gradients, so the forward value does not
    depend on ``gamma``. Leading axes beyond (N, C) are averaged.
    """
    if len(encoder) != len(decoder):
        raise DimensionError(f"{len(encoder)} encoder layers vs {len(decoder)} decoder layers")
    total = 0.0
    for f, fd in zip(encoder, decoder):
        f = np.asarray(f, dtype=np.float64)
        fd = ops.lift(fd)
        if f.shape != fd.shape:
            raise DimensionError(f"layer shapes {f.shape} and {fd.shape} differ")
        w = position_weights(f, fd, gamma)
        fd = grad_scale(fd, w[..., None])
        lead = f.shape[:-2]
        flat = ops.reshape(fd, lead + (-1,)) if lead else ops.reshape(fd, (-1,))
        d = cosine_distance(f.reshape(lead + (-1,)), flat)
        total = ops.add(total, ops.mean(d))
    return ops.mul(total, 1.0 / len(decoder))


def total_loss(rec, nrm, lam):
    if lam < 0:
        raise InvalidInputError("lambda must be nonnegative")
    return ops.add(rec, ops.mul(nrm, lam))


def loss_terms(model, clean, masked, token_mask):
    """Both losses for one batch of clean/masked (B, L, N, C) features."""
    F = aggregate(masked)
    tokens = ni_extract(model, F)
    nrm = normal_loss(F, tokens, token_mask)
    dec = nig_decode(model, F, tokens)
    rec = reconstruction_loss(np.moveaxis(clean, -3, 0), dec, model.hyper.gamma)
    return rec, nrm


def augment_shifts(images, copies, patch, rng):
    """Append ``copies`` cyclically shifted versions of every image.

    Shifts are drawn below the patch size: the backbone has no positional
    embedding, so whole-patch shifts would only permute tokens. Periodic
    backgrounds whose period divides the image size wrap seamlessly.
    """
    out = [images]
    for _ in range(copies):
        dy, dx = rng.integers(0, patch, size=(2, len(images)))
        out.append(np.stack([np.roll(im, (a, b), axis=(0, 1)) for im, a, b in zip(images, dy, dx)]))
    return np.concatenate(out)


def lr_at(step, total, peak, warmup):
    """Linear warm-up to ``peak`` followed by cosine decay to zero at ``total``."""
    if step < warmup:
        return peak * (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return 0.5 * peak * (1.0 + np.cos(np.pi * frac))


def train_detector(manifest, hyper=None, seed=0, steps=None, features=None):
    """Fit the extractor and decoder on ``train_normal`` images.

    Backbone features are computed once and cached; each step draws a batch,
    corrupts random tokens with matched noise, and takes one AdamW step.
    Returns ``(model, losses)`` where ``losses`` is the per-step total loss.
    """
    hyper = hyper or DetectorHyper()
    steps = hyper.steps if steps is None else steps
    model = DetectorModel(hyper, seed=seed)
    if features is None:
        recs = manifest.select("train_normal")
        if not recs:
            raise InvalidInputError("manifest has no train_normal images")
        images = np.stack([manifest.image(r) for r in recs])
        images = augment_shifts(images, hyper.aug_shifts, hyper.patch,
                                np.random.default_rng(np.random.SeedSequence([seed, 2])))
        features = np.concatenate([model.backbone.features_batch(images[i:i + 16])[0]
                                   for i in range(0, len(images), 16)])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    opt = AdamW(model.params(), lr=hyper.lr, wd=hyper.weight_decay)
    losses = []
    n = features.shape[0]
    for step in range(steps):
        opt.lr = lr_at(step, steps, hyper.lr, hyper.warmup)
        idx = rng.choice(n, size=min(hyper.batch, n), replace=False)
        clean = features[idx]
        masked, token_mask = mask_token_batch(clean, hyper.mask_ratio, rng)
        rec, nrm = loss_terms(model, clean, masked, token_mask)
        loss = total_loss(rec, nrm, hyper.lam)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"loss became {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if step % 100 == 0:
            log.info("detector step %d loss %.4f (rec %.4f, normal %.4f)",
                     step, value, rec.item(), nrm.item())
    model.trained = True
    return model, np.array(losses)


def patch_scores(model, layers):
    """Mean-over-layers cosine residual per patch for (…, L, N, C) features."""
    F = aggregate(layers)
    dec = nig_decode(model, F, ni_extract(model, F))
    res = [cosine_distance(layers[..., i, :, :], d).data for i, d in enumerate(dec)]
    return np.mean(res, axis=0)


def upsample_smooth(grid_scores, shape, sigma):
    """Bilinear upsample of a patch grid to ``shape`` then Gaussian smoothing."""
    gh, gw = grid_scores.shape
    up = ndimage.zoom(grid_scores, (shape[0] / gh, shape[1] / gw), order=1,
                      mode="nearest", grid_mode=True)
    if sigma > 0:
        up = ndimage.gaussian_filter(up, sigma, mode="nearest")
    return np.maximum(up, 0.0)


def score(model, image):
    """Return ``(score_map, image_score)`` for one image; the map matches its size."""
    maps, scores = score_batch(model, np.asarray(image)[None])
    return maps[0], scores[0]


def score_batch(model, images, chunk=16):
    """Score a (B, H, W) stack. Returns ``(maps (B, H, W), image_scores (B,))``."""
    if not model.trained:
        raise UsageError("detector has not been trained; run train_detector or load a checkpoint")
    images = np.asarray(images, dtype=np.float64)
    maps = []
    for s in range(0, len(images), chunk):
        layers, grid = model.backbone.features_batch(images[s:s + chunk])
        ps = patch_scores(model, layers)
        for row in ps:
            maps.append(upsample_smooth(row.reshape(grid), images.shape[1:], model.hyper.smooth_sigma))
    maps = np.stack(maps)
    return maps, maps.reshape(len(maps), -1).max(axis=1)


# -- persistence -------------------------------------------------------------

def save_detector(model, path):
    hyper = asdict(model.hyper)
    hyper["trained"] = model.trained
    save_checkpoint(path, "detector", hyper, model.state())


def load_detector(path):
    kind, hyper, arrays = load_checkpoint(path)
    if kind != "detector":
        raise InvalidInputError(f"{path} holds a {kind!r} checkpoint, not a detector")
    trained = hyper.pop("trained", True)
    model = DetectorModel(DetectorHyper(**hyper))
    for p in model.all_params():
        if p.name not in arrays:
            raise InvalidInputError(f"{path}: missing parameter {p.name}")
        if arrays[p.name].shape != p.data.shape:
            raise DimensionError(f"{p.name}: stored {arrays[p.name].shape}, expected {p.data.shape}")
        p.data = arrays[p.name]
    model.trained = trained
    return model


def export_score_map(score_map, path):
    """Write a 16-bit PGM scaled to [min, max]; returns the sidecar dict."""
    lo, hi = float(score_map.min()), float(score_map.max())
    span = hi - lo if hi > lo else 1.0
    write_pgm16((score_map - lo) / span, path)
    return {"min": lo, "max": hi}


def import_score_map(path, lo, hi):
    span = hi - lo if hi > lo else 1.0
    return read_pgm16(path) * span + lo
