"""Soft-mask guided ViT and the teacher–student classifier for defect crops.

Head layout: one cosine-prototype map to C = 1 + C_labeled + C_unlabeled
outputs, sliced as [defect-free | labeled | unlabeled]. Sample labels use the
same indices: 0 for defect-free crops, 1..C_labeled for labeled defects, and
−1 for unlabeled crops.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp, softmax

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (DimensionError, InvalidInputError, TrainingDivergenceError,
                     UsageError)
from .numerics import Param, attention, ops
from .numerics.optim import AdamW, ema_update
from .vit import ToyViT, patchify

UNLABELED = -1


@dataclass
class HeadConfig:
    c_labeled: int
    c_unlabeled: int

    def __post_init__(self):
        if self.c_labeled < 0 or self.c_unlabeled < 0:
            raise InvalidInputError("class counts must be non-negative")

    @property
    def total(self):
        return self.c_labeled + self.c_unlabeled + 1

    @property
    def unlabeled_slice(self):
        return slice(1 + self.c_labeled, self.total)


@dataclass
class AugmentConfig:
    area: tuple = (0.7, 1.0)
    flip: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    noise: float = 0.02

    @classmethod
    def none(cls):
        return cls(area=(1.0, 1.0), flip=False, brightness=0.0, contrast=0.0, noise=0.0)


@dataclass
class ClassifierHyper:
    input_px: int = 112
    patch: int = 14
    dim: int = 64
    depth: int = 4
    heads: int = 4
    j: int = 2
    backbone_seed: int = 0
    tau_teacher: float = 0.04
    tau_student: float = 0.1
    momentum: float = 0.996
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 32
    sinkhorn_iters: int = 3
    sinkhorn_temp: float = 0.05
    centering: bool = False
    center_momentum: float = 0.9
    n_prototypes: int = 32
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})
        if not 1 <= self.j <= self.depth:
            raise InvalidInputError(f"j must lie in [1, depth={self.depth}], got {self.j}")
        if not 0 < self.tau_teacher < self.tau_student:
            raise InvalidInputError("need 0 < tau_teacher < tau_student")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("EMA momentum must lie in [0, 1)")
        if self.input_px % self.patch:
            raise InvalidInputError("input size must be a multiple of the patch size")


# ---------------------------------------------------------------- soft mask

def soft_mask_vector(mask, p):
    """[max(M); row-major p×p average pool of M], length N + 1."""
    mask = np.asarray(mask, dtype=np.float64)
    pooled, _ = patchify(mask, p)  # raises DimensionError when not divisible
    return np.concatenate([mask.reshape(*mask.shape[:-2], -1).max(axis=-1, keepdims=True),
                           pooled.mean(axis=-1)], axis=-1)


def smg_attention(q, k, v, m_hat):
    """Softmax attention with the soft-mask vector added to every query's logits."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if m_hat.shape[-1] != ops.lift(k).shape[-2]:
        raise DimensionError(f"soft-mask vector of length {m_hat.shape[-1]} for "
                             f"{ops.lift(k).shape[-2]} keys")
    return attention(q, k, v, bias=m_hat)


# ---------------------------------------------------------------- model

class SMGViT:
    """Toy ViT with a CLS token whose last ``j`` blocks take the soft-mask bias.

    The lower blocks and the embedding come from the seeded backbone and are
    frozen; the last ``j`` blocks start as trainable copies of it.
    """

    def __init__(self, hyper: ClassifierHyper):
        h = hyper
        base = ToyViT(h.patch, h.dim, h.depth, h.heads, seed=h.backbone_seed, cls_token=True)
        self.hyper = h
        self.base = base
        self.frozen = base.blocks[:h.depth - h.j]
        self.smg = [b.copy(f"smg{i}", True) for i, b in enumerate(base.blocks[h.depth - h.j:])]

    def frozen_params(self):
        ps = [self.base.embed_w, self.base.embed_b, self.base.cls]
        for b in self.frozen:
            ps += b.params()
        return ps

    def params(self):
        return [p for b in self.smg for p in b.params()]


def lower_tokens(model, crops):
    """Embedding + frozen blocks, as plain arrays (B, N+1, C)."""
    crops = np.asarray(crops, dtype=np.float64)
    px = model.hyper.input_px
    if crops.shape[-2:] != (px, px):
        raise DimensionError(f"crop {crops.shape[-2:]} does not match input size {px}x{px}")
    x, _ = model.base.embed(crops)
    for block in model.frozen:
        x, _ = block(x)
    return x.data


def upper_tokens(blocks, x, m_hat, bias=True):
    """Run the SMG blocks; returns (tokens, last-layer attention probs)."""
    probs = None
    for block in blocks:
        x, probs = block(x, m_hat if bias else None)
    return x, probs


def cls_embedding(x):
    return ops.l2_normalize(ops.take(ops.layer_norm(x), (Ellipsis, 0, slice(None))))


def smg_vit_forward(model, crop, m_hat, return_attention=False):
    """Unit-norm CLS embedding of ``crop`` (…, H, W) with soft-mask vector ``m_hat``."""
    x, probs = upper_tokens(model.smg, lower_tokens(model, crop), m_hat)
    z = cls_embedding(x)
    return (z, probs) if return_attention else z


# ---------------------------------------------------------------- heads

class PrototypeHead:
    """Cosine logits against ``n`` learnable prototypes."""

    def __init__(self, dim, n, rng, name="head"):
        self.w = Param(rng.normal(size=(n, dim)), f"{name}.w")

    def params(self):
        return [self.w]

    def __call__(self, z):
        return ops.matmul(z, ops.l2_normalize(self.w).T)


def mask_known_logits(logits, unlabeled, c_labeled):
    """Exclude the labeled-class slice (indices 1..C_l) for unlabeled rows with −∞."""
    out = np.array(logits, dtype=np.float64, copy=True)
    unlabeled = np.asarray(unlabeled, dtype=bool)
    out[unlabeled, 1:1 + c_labeled] = -np.inf
    return out


def sinkhorn(logits, iters=3, temp=1.0):
    """Balanced soft assignment of B rows to C columns.

    Log-domain Sinkhorn–Knopp on exp(logits / temp): columns are scaled to
    sum B/C, then rows to sum 1; the result ends on a row step, so rows sum
    to one exactly up to rounding.
    """
    L = np.asarray(logits, dtype=np.float64)
    if L.ndim != 2 or min(L.shape) < 1:
        raise InvalidInputError("sinkhorn needs a nonempty B×C matrix")
    if iters < 1:
        raise InvalidInputError("sinkhorn needs at least one iteration")
    if not np.all(np.isfinite(L)):
        raise InvalidInputError("sinkhorn logits must be finite")
    B, C = L.shape
    log_q = L / temp
    log_col = np.log(B / C)
    for _ in range(iters):
        log_q = log_q + log_col - logsumexp(log_q, axis=0, keepdims=True)
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    return np.exp(log_q)


def soft_cross_entropy(target, logits, tau):
    """mean_b −Σ_c target[b, c] · log softmax(logits[b] / τ)[c]; zero-target entries drop out."""
    logp = ops.log_softmax(ops.mul(logits, 1.0 / tau))
    t = np.asarray(target, dtype=np.float64)
    return ops.mul(ops.sum(ops.mul(logp, t)), -1.0 / len(t))


# ---------------------------------------------------------------- augmentation

def _resize(img, size):
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (size, size):
        return img.copy()
    return ndimage.zoom(img, (size / img.shape[0], size / img.shape[1]), order=1,
                        grid_mode=True, mode="nearest")


def prepare_crop(image, soft_mask, size):
    """Resize a crop and its soft mask to the network input size."""
    return _resize(image, size), np.clip(_resize(soft_mask, size), 0.0, 1.0)


def _one_view(img, mask, rng, cfg):
    h, w = img.shape
    area = rng.uniform(*cfg.area)
    side = int(round(np.sqrt(area) * h))
    if side < h:
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        img = _resize(img[y0:y0 + side, x0:x0 + side], h)
        mask = _resize(mask[y0:y0 + side, x0:x0 + side], h)
    if cfg.flip and rng.random() < 0.5:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if cfg.brightness or cfg.contrast:
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        b = rng.uniform(-cfg.brightness, cfg.brightness)
        mu = img.mean()
        img = (img - mu) * c + mu + b
    if cfg.noise:
        img = img + cfg.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0), np.clip(mask, 0.0, 1.0)


def augment_pair(crop, soft_mask, seed, cfg=None):
    """Two seeded views ((img1, mask1), (img2, mask2)); masks follow their image's geometry."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    crop = np.asarray(crop, dtype=np.float64)
    soft_mask = np.asarray(soft_mask, dtype=np.float64)
    return _one_view(crop, soft_mask, rng, cfg), _one_view(crop, soft_mask, rng, cfg)


# ---------------------------------------------------------------- teacher–student

class TeacherStudent:
    """Student and EMA teacher sharing the frozen lower network."""

    def __init__(self, hyper: ClassifierHyper, head: HeadConfig | None = None, seed=0):
        self.hyper = hyper
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        self.student = SMGViT(hyper)
        self.proto = PrototypeHead(hyper.dim, hyper.n_prototypes, rng, "proto")
        self.head_config = None
        self.head = self.teacher_head = None
        if head is not None:
            self.configure_head(head, rng)
        self.teacher_smg = [b.copy(f"t.smg{i}", False) for i, b in enumerate(self.student.smg)]
        self.teacher_proto = copy.deepcopy(self.proto)
        self.center = np.zeros(hyper.n_prototypes)
        self.step = 0
        self.trained = False
        self._opt = None
        self._opt_key = None

    def configure_head(self, head: HeadConfig, rng=None):
        """Install a head with ``head.total`` outputs.

        When a head with the same labeled count already exists, its
        defect-free and labeled rows carry over (student and teacher) and
        only the unlabeled rows start fresh.
        """
        rng = rng or np.random.default_rng(self.hyper.backbone_seed + 1)
        old, old_teacher = self.head, self.teacher_head
        keep = old is not None and self.head_config.c_labeled == head.c_labeled
        self.head_config = head
        self.head = PrototypeHead(self.hyper.dim, head.total, rng, "head")
        self.teacher_head = copy.deepcopy(self.head)
        if keep:
            n = 1 + head.c_labeled
            self.head.w.data[:n] = old.w.data[:n]
            self.teacher_head.w.data[:n] = old_teacher.w.data[:n]
        for p in self.teacher_head.params():
            p.requires_grad = False
        self._opt = None

    def student_params(self, stage):
        if stage == "pretrain":
            extra = self.head.params() if self.head is not None else []
            return self.student.params() + self.proto.params() + extra
        if self.head is None:
            raise UsageError("configure the classification head before training it")
        if stage == "heads":
            return self.head.params()
        return self.student.params() + self.head.params()

    def teacher_params(self, stage):
        if stage == "pretrain":
            extra = self.teacher_head.params() if self.head is not None else []
            return ([p for b in self.teacher_smg for p in b.params()] + self.teacher_proto.params()
                    + extra)
        if stage == "heads":
            return self.teacher_head.params()
        return [p for b in self.teacher_smg for p in b.params()] + self.teacher_head.params()

    def optimizer(self, stage):
        if self._opt is None or self._opt_key != stage:
            h = self.hyper
            self._opt = AdamW(self.student_params(stage), lr=h.lr, wd=h.weight_decay)
            self._opt_key = stage
        return self._opt

    def teacher_embed(self, x_low, m_hat):
        x, probs = upper_tokens(self.teacher_smg, x_low, m_hat)
        return cls_embedding(x).data, probs.data

    def student_embed(self, x_low, m_hat):
        return cls_embedding(upper_tokens(self.student.smg, x_low, m_hat)[0])


@dataclass
class CropBatch:
    images: np.ndarray  # (B, H, W) at input size
    masks: np.ndarray   # (B, H, W) soft masks in [0, 1]
    labels: np.ndarray  # (B,) head index, or −1 for unlabeled

    def __len__(self):
        return len(self.labels)


def _views(ts, batch, seed):
    h = ts.hyper
    ss = np.random.SeedSequence([seed, 11]).generate_state(len(batch))
    pairs = [augment_pair(img, m, int(s), h.augment) for img, m, s in zip(batch.images, batch.masks, ss)]
    v1 = np.stack([p[0][0] for p in pairs]), np.stack([p[0][1] for p in pairs])
    v2 = np.stack([p[1][0] for p in pairs]), np.stack([p[1][1] for p in pairs])
    return v1, v2


def _finish(ts, loss, stage):
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"non-finite classifier loss at step {ts.step}")
    opt = ts.optimizer(stage)
    opt.zero_grad()
    loss.backward()
    opt.step()
    ema_update(ts.teacher_params(stage), ts.student_params(stage), ts.hyper.momentum)
    ts.step += 1
    ts.trained = True
    return value


def pretrain_step(ts, batch, seed):
    """Self-distillation on prototype logits, each view teaching the other.

    When a head is configured, labeled rows (label >= 0) of both views also
    get a supervised cross-entropy on it.
    """
    h = ts.hyper
    (i1, m1), (i2, m2) = _views(ts, batch, seed)
    mv1, mv2 = soft_mask_vector(m1, h.patch), soft_mask_vector(m2, h.patch)
    x1, x2 = lower_tokens(ts.student, i1), lower_tokens(ts.student, i2)
    t_logits = [ts.teacher_proto(ops.lift(ts.teacher_embed(x, m)[0])).data for x, m in ((x1, mv1), (x2, mv2))]
    targets = [softmax((t - ts.center) / h.tau_teacher, axis=1) for t in t_logits]
    z1, z2 = ts.student_embed(x1, mv1), ts.student_embed(x2, mv2)
    loss = ops.mul(ops.add(soft_cross_entropy(targets[1], ts.proto(z1), h.tau_student),
                           soft_cross_entropy(targets[0], ts.proto(z2), h.tau_student)), 0.5)
    labels = np.asarray(batch.labels)
    known = np.flatnonzero(labels != UNLABELED)
    if ts.head is not None and len(known):
        onehot = np.zeros((len(known), ts.head_config.total))
        onehot[np.arange(len(known)), labels[known]] = 1.0
        sup = [soft_cross_entropy(onehot, ops.take(ts.head(z), known), h.tau_student) for z in (z1, z2)]
        loss = ops.add(loss, ops.mul(ops.add(*sup), 0.5))
    if h.centering:
        batch_center = np.concatenate(t_logits).mean(axis=0)
        ts.center = h.center_momentum * ts.center + (1 - h.center_momentum) * batch_center
    return _finish(ts, loss, "pretrain"), ts


def distill_terms(ts, batch, seed, stage="heads"):
    """The three loss terms of one classification step, as Tensors.

    Returns ``(distill, supervised, sinkhorn)``; terms with no contributing
    samples are the constant 0.
    """
    h, hc = ts.hyper, ts.head_config
    if hc is None:
        raise UsageError("configure the classification head first")
    (i1, m1), (i2, m2) = _views(ts, batch, seed)
    mv1, mv2 = soft_mask_vector(m1, h.patch), soft_mask_vector(m2, h.patch)
    x1, x2 = lower_tokens(ts.student, i1), lower_tokens(ts.student, i2)
    labels = np.asarray(batch.labels)
    unl = labels == UNLABELED

    t_logits = ts.teacher_head(ops.lift(ts.teacher_embed(x1, mv1)[0])).data
    target = softmax(mask_known_logits(t_logits, unl, hc.c_labeled) / h.tau_teacher, axis=1)
    z2 = ts.student_embed(x2, mv2) if stage != "heads" else ops.lift(ts.student_embed(x2, mv2).data)
    s_logits = ts.head(z2)
    distill = soft_cross_entropy(target, s_logits, h.tau_student)

    zero = ops.lift(0.0)
    supervised = zero
    if np.any(~unl):
        onehot = np.zeros((int((~unl).sum()), hc.total))
        onehot[np.arange(len(onehot)), labels[~unl]] = 1.0
        supervised = soft_cross_entropy(onehot, ops.take(s_logits, np.flatnonzero(~unl)), h.tau_student)

    pseudo = zero
    if np.any(unl) and hc.c_unlabeled > 0:
        sl = hc.unlabeled_slice
        q = sinkhorn(t_logits[unl][:, sl], h.sinkhorn_iters, h.sinkhorn_temp)
        s_unl = ops.take(s_logits, np.flatnonzero(unl))
        pseudo = soft_cross_entropy(q, ops.take(s_unl, (slice(None), np.arange(sl.start, sl.stop))), h.tau_student)
    return distill, supervised, pseudo


def distill_step(ts, batch, seed, stage="heads"):
    """One student update and EMA teacher update; returns ``(loss, ts)``.

    ``stage="heads"`` trains only the classification head on a frozen
    encoder; ``stage="full"`` also trains the SMG blocks.
    """
    d, s, p = distill_terms(ts, batch, seed, stage)
    loss = ops.add(ops.add(d, s), p)
    return _finish(ts, loss, stage), ts


# ---------------------------------------------------------------- inference

def embed_crops(ts, images, masks, chunk=64, teacher=True):
    """Teacher CLS embeddings (B, C) for prepared crops."""
    h = ts.hyper
    out = []
    for i in range(0, len(images), chunk):
        x = lower_tokens(ts.student, images[i:i + chunk])
        m = soft_mask_vector(np.asarray(masks[i:i + chunk]), h.patch)
        out.append(ts.teacher_embed(x, m)[0] if teacher else ts.student_embed(x, m).data)
    return np.concatenate(out) if out else np.zeros((0, h.dim))


def cls_attention(ts, images, masks):
    """Head-averaged last-layer attention of the CLS query over patch keys, (B, N)."""
    x = lower_tokens(ts.student, images)
    _, probs = ts.teacher_embed(x, soft_mask_vector(np.asarray(masks), ts.hyper.patch))
    return probs[:, :, 0, 1:].mean(axis=1)


def predict(ts, images, masks, chunk=64):
    """Teacher head probabilities (B, C) at the teacher temperature."""
    if not ts.trained or ts.head is None:
        raise UsageError("classifier has not been trained")
    z = embed_crops(ts, images, masks, chunk)
    logits = ts.teacher_head(ops.lift(z)).data
    return softmax(logits / ts.hyper.tau_teacher, axis=1)


def classify(ts, crop, soft_mask):
    """(head index, confidence) for one prepared crop; index 0 is defect-free."""
    probs = predict(ts, np.asarray(crop)[None], np.asarray(soft_mask)[None])[0]
    k = int(np.argmax(probs))
    return k, float(probs[k])


# ---------------------------------------------------------------- persistence

def _named(ts):
    groups = {"smg": ts.student.params(), "proto": ts.proto.params(),
              "t.smg": [p for b in ts.teacher_smg for p in b.params()],
              "t.proto": ts.teacher_proto.params()}
    if ts.head is not None:
        groups["head"] = ts.head.params()
        groups["t.head"] = ts.teacher_head.params()
    return {f"{g}/{i}": p for g, ps in groups.items() for i, p in enumerate(ps)}


def save_classifier(ts, path, extra=None):
    hyper = asdict(ts.hyper)
    meta = {"hyper": hyper, "trained": ts.trained, "step": ts.step,
            "head": None if ts.head_config is None else asdict(ts.head_config),
            "extra": extra or {}}
    arrays = {name: p.data for name, p in _named(ts).items()}
    arrays["center"] = ts.center
    save_checkpoint(path, "classifier", meta, arrays)


def load_classifier(path):
    """Returns ``(ts, extra)``."""
    from .checkpoint import CheckpointError

    kind, meta, arrays = load_checkpoint(path)
    if kind != "classifier":
        raise CheckpointError(f"{path}: expected a classifier checkpoint, found {kind!r}")
    hyper = ClassifierHyper(**meta["hyper"])
    head = HeadConfig(**meta["head"]) if meta["head"] else None
    ts = TeacherStudent(hyper, head)
    for name, p in _named(ts).items():
        p.data = arrays[name].copy()
    ts.center = arrays["center"].copy()
    ts.trained, ts.step = meta["trained"], meta["step"]
    return ts, meta["extra"]
