"""End-to-end runs: corpus → detector → scores → masks and crops → K̂ → classifier → metrics.

Every stage reads the artifacts of the stages before it from a run directory
and writes its own; any stage can be re-run alone. Layout::

    run/
      config.json        effective configuration
      run.log            one line per stage, with the config hash
      data/              synthetic corpus and manifest.json
      checkpoints/       detector.ckpt, encoder.ckpt, classifier.ckpt
      scores/            16-bit score maps and index.json (ranges, image scores)
      masks/             final binary masks (P5 PGM)
      crops/             crop images, soft masks and index.json
      embeddings.csv     encoder embeddings of every crop (unit rows)
      labels.csv         head label per embedding row (−1 = unlabeled)
      k.json             class-count estimate
      predictions.csv    classifier output for held-out crops
      metrics.json
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import binarizer, class_count, classifier, detector
from .data import CorpusConfig, Manifest, build_synthetic_corpus
from .errors import InvalidInputError, StageDependencyError
from .metrics import ari, auroc, contingency, f1_hungarian, nmi, pixel_auroc
from .pgm import read_pgm, read_pgm16, write_pgm, write_pgm16

log = logging.getLogger(__name__)

DEFAULT_SEED = 42
STAGES = ("gen-data", "train-detector", "score", "binarize", "pretrain",
          "estimate-k", "train-classifier", "eval")


@dataclass
class BinarizerConfig:
    p1: float = 50.0
    p2: float = 99.5
    K: int = 64
    epsilon: int = 0
    crop_px: int | None = None

    def __post_init__(self):
        if not 0 <= self.p1 < self.p2 <= 100:
            raise InvalidInputError("need 0 <= p1 < p2 <= 100")
        if self.K < 8:
            raise InvalidInputError("the sweep needs K >= 8")
        if self.epsilon not in (0, 1):
            raise InvalidInputError("epsilon must be 0 or 1")


@dataclass
class DiscoveryConfig:
    pretrain_steps: int = 200
    steps: int = 600
    stage: str = "full"
    k_min: int = 4
    k_max: int = 9
    k_restarts: int = 3
    unlabeled_share: float = 0.4
    normal_crops: int = 24
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in ("heads", "full"):
            raise InvalidInputError("classifier stage must be 'heads' or 'full'")
        if self.pretrain_steps < 0 or self.steps < 0:
            raise InvalidInputError("step counts must be non-negative")
        if not 0 <= self.unlabeled_share <= 1:
            raise InvalidInputError("unlabeled_share must lie in [0, 1]")
        if self.k_min > self.k_max:
            raise InvalidInputError("k_min exceeds k_max")
        self.classifier_hyper()  # validate

    def classifier_hyper(self):
        return classifier.ClassifierHyper(**self.hyper)


@dataclass
class RunConfig:
    seed: int = DEFAULT_SEED
    corpus: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    binarizer: BinarizerConfig = field(default_factory=BinarizerConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)

    def __post_init__(self):
        if isinstance(self.binarizer, dict):
            self.binarizer = BinarizerConfig(**self.binarizer)
        if isinstance(self.discovery, dict):
            self.discovery = DiscoveryConfig(**self.discovery)
        self.corpus_config()
        self.detector_hyper()

    def corpus_config(self):
        return CorpusConfig.from_dict(self.corpus) if self.corpus else CorpusConfig()

    def detector_hyper(self):
        return detector.DetectorHyper(**self.detector)

    def to_dict(self):
        d = asdict(self)
        if not self.corpus:
            d["corpus"] = CorpusConfig().to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def demo_config(seed=DEFAULT_SEED):
    """The bundled configuration used by ``run-all`` when no config file is given."""
    corpus = CorpusConfig(n_train_normal=64, n_test_normal=32, n_test_defect=32, n_labeled=40,
                          n_unlabeled=40, n_test_per_class=10).to_dict()
    hyper = {"j": 3, "lr": 3e-3, "momentum": 0.99, "sinkhorn_temp": 0.02, "centering": True}
    discovery = DiscoveryConfig(pretrain_steps=300, steps=600, k_min=3, k_max=9, hyper=hyper)
    return RunConfig(seed=seed, corpus=corpus, detector={"steps": 1000}, discovery=discovery)


# ---------------------------------------------------------------- run directory

class Run:
    """Paths and bookkeeping for one run directory."""

    def __init__(self, root, config: RunConfig | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        if config is None:
            if not self.config_path.exists():
                raise StageDependencyError("any", str(self.config_path),
                                           "start with gen-data or run-all to create the run")
            config = RunConfig.load(self.config_path)
        self.config = config

    config_path = property(lambda self: self.root / "config.json")
    data = property(lambda self: self.root / "data")
    checkpoints = property(lambda self: self.root / "checkpoints")
    scores = property(lambda self: self.root / "scores")
    masks = property(lambda self: self.root / "masks")
    crops = property(lambda self: self.root / "crops")
    embeddings = property(lambda self: self.root / "embeddings.csv")
    labels = property(lambda self: self.root / "labels.csv")
    k_file = property(lambda self: self.root / "k.json")
    predictions = property(lambda self: self.root / "predictions.csv")
    metrics = property(lambda self: self.root / "metrics.json")

    def save_config(self):
        self.config_path.write_text(json.dumps(self.config.to_dict(), indent=1, sort_keys=True),
                                    encoding="utf-8")

    def require(self, stage, path, producer):
        if not Path(path).exists():
            raise StageDependencyError(stage, str(path), f"run the '{producer}' stage first")

    def manifest(self, stage):
        self.require(stage, self.data / "manifest.json", "gen-data")
        return Manifest.load(self.data / "manifest.json")

    def record(self, stage, seconds, **info):
        line = {"stage": stage, "seconds": round(seconds, 2), "config": self.config.digest(),
                "seed": self.config.seed, **info}
        with open(self.root / "run.log", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True), encoding="utf-8")


def _load(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _stem(record):
    return Path(record.path).stem


# ---------------------------------------------------------------- stages

def gen_data(run):
    cfg = run.config
    manifest = build_synthetic_corpus(cfg.corpus_config(), cfg.seed, run.data)
    digest = hashlib.sha256(manifest.to_json().encode()).hexdigest()[:16]
    return {"images": len(manifest.records), "manifest": digest}


def train_detector_stage(run):
    manifest = run.manifest("train-detector")
    model, losses = detector.train_detector(manifest, run.config.detector_hyper(), seed=run.config.seed)
    run.checkpoints.mkdir(exist_ok=True)
    detector.save_detector(model, run.checkpoints / "detector.ckpt")
    return {"steps": len(losses), "final_loss": float(losses[-1]) if len(losses) else None}


def score_stage(run):
    """Score every image except the detector's own training set."""
    manifest = run.manifest("score")
    run.require("score", run.checkpoints / "detector.ckpt", "train-detector")
    model = detector.load_detector(run.checkpoints / "detector.ckpt")
    recs = [r for r in manifest.records if r.split != "train_normal"]
    run.scores.mkdir(exist_ok=True)
    index = {}
    for s in range(0, len(recs), 16):
        chunk = recs[s:s + 16]
        maps, scores = detector.score_batch(model, np.stack([manifest.image(r) for r in chunk]))
        for r, m, v in zip(chunk, maps, scores):
            name = _stem(r)
            rng = detector.export_score_map(m, run.scores / f"{name}.pgm")
            np.save(run.scores / f"{name}.npy", m)
            index[r.path] = dict(rng, file=f"{name}.npy", image_score=float(v))
    _dump(run.scores / "index.json", index)
    return {"maps": len(index)}


def _score_map(run, index, record):
    return np.load(run.scores / index[record.path]["file"])


def binarize_stage(run):
    """Masks for every scored image and defect-centred crops.

    Each defect-bearing image contributes its largest crop; defect-free
    training crops are random windows of ``train_normal`` images with an
    all-zero soft mask.
    """
    manifest = run.manifest("binarize")
    run.require("binarize", run.scores / "index.json", "score")
    index = _load(run.scores / "index.json")
    b = run.config.binarizer
    run.masks.mkdir(exist_ok=True)
    run.crops.mkdir(exist_ok=True)
    crops = []
    size = manifest.config.get("size", 224)
    crop_px = b.crop_px or size // 4

    def emit(name, record, img, soft, window, label):
        write_pgm(img, run.crops / f"{name}.pgm")
        write_pgm16(soft, run.crops / f"{name}.mask.pgm")
        crops.append({"name": name, "source": record.path, "split": record.split,
                      "label": record.label, "window": list(map(int, window))})

    for r in manifest.records:
        if r.path not in index:
            continue
        R = _score_map(run, index, r)
        S, M, t_star, plateau, _ = binarizer.binarize(R, b.p1, b.p2, b.K, b.epsilon)
        write_pgm(M.astype(np.float64), run.masks / f"{_stem(r)}.pgm")
        index[r.path].update(t_star=float(t_star), plateau=[plateau.start, plateau.stop])
        if r.split == "test" and r.label is None:
            continue
        found = binarizer.crop(manifest.image(r), S, M, crop_px)
        if found:
            c = found[0]
            emit(f"{_stem(r)}_0", r, c.subimage, c.soft_mask, c.window, r.label)

    rng = np.random.default_rng(np.random.SeedSequence([run.config.seed, 3]))
    normals = manifest.select("train_normal")
    for i in range(min(run.config.discovery.normal_crops, len(normals) or 0) if normals else 0):
        r = normals[i]
        img = manifest.image(r)
        y0, x0 = (int(v) for v in rng.integers(0, size - crop_px + 1, size=2))
        emit(f"{_stem(r)}_n", r, img[y0:y0 + crop_px, x0:x0 + crop_px],
             np.zeros((crop_px, crop_px)), (x0, y0, crop_px, crop_px), 0)
    _dump(run.scores / "index.json", index)
    _dump(run.crops / "index.json", crops)
    return {"crops": len(crops)}


def _crop_arrays(run, stage, entries):
    px = run.config.discovery.classifier_hyper().input_px
    X, M = [], []
    for e in entries:
        img = read_pgm(run.crops / f"{e['name']}.pgm")
        soft = read_pgm16(run.crops / f"{e['name']}.mask.pgm")
        a, m = classifier.prepare_crop(img, soft, px)
        X.append(a)
        M.append(m)
    if not X:
        raise StageDependencyError(stage, str(run.crops), "binarize produced no crops")
    return np.stack(X), np.stack(M)


def _head_labels(entries, n_base):
    """0 for defect-free crops, 1..n_base for labeled crops, −1 for unlabeled ones."""
    out = []
    for e in entries:
        if e["split"] == "train_normal":
            out.append(0)
        elif e["split"] == "labeled_defect":
            if not 1 <= e["label"] <= n_base:
                raise InvalidInputError(f"labeled crop {e['name']} has class {e['label']}")
            out.append(e["label"])
        else:
            out.append(classifier.UNLABELED)
    return np.array(out)


def _train_entries(run, stage):
    run.require(stage, run.crops / "index.json", "binarize")
    entries = _load(run.crops / "index.json")
    return [e for e in entries if e["split"] != "test"], [e for e in entries if e["split"] == "test"]


def _batches(labels, batch, share, steps, seed):
    """Index batches with a fixed share of unlabeled rows (when both kinds exist)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    unl = np.flatnonzero(labels == classifier.UNLABELED)
    rest = np.flatnonzero(labels != classifier.UNLABELED)
    batch = min(batch, len(labels))
    nu = int(round(share * batch)) if len(unl) and len(rest) else 0
    nu = min(nu, len(unl))
    for _ in range(steps):
        if nu:
            yield np.concatenate([rng.choice(unl, nu, replace=False),
                                  rng.choice(rest, min(batch - nu, len(rest)), replace=False)])
        else:
            yield rng.choice(len(labels), batch, replace=False)


def frozen_digest(model):
    """SHA-256 over the frozen embedding and lower blocks of an SMG-ViT."""
    h = hashlib.sha256()
    for p in model.frozen_params():
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]


def pretrain_stage(run):
    """Encoder training on all training crops, then embeddings for K̂.

    Self-distillation covers every crop; a labeled-only head adds supervised
    cross-entropy on the defect-free and base-class crops, which keeps the
    prototype objective from collapsing on this small corpus.
    """
    d = run.config.discovery
    train, _ = _train_entries(run, "pretrain")
    X, M = _crop_arrays(run, "pretrain", train)
    n_base = run.config.corpus_config().n_base
    labels = _head_labels(train, n_base)
    ts = classifier.TeacherStudent(d.classifier_hyper(), classifier.HeadConfig(n_base, 0),
                                   seed=run.config.seed)
    before = frozen_digest(ts.student)
    for step, idx in enumerate(_batches(labels, ts.hyper.batch, d.unlabeled_share,
                                        d.pretrain_steps, run.config.seed)):
        classifier.pretrain_step(ts, classifier.CropBatch(X[idx], M[idx], labels[idx]), step)
    run.checkpoints.mkdir(exist_ok=True)
    classifier.save_classifier(ts, run.checkpoints / "encoder.ckpt")
    Z = classifier.embed_crops(ts, X, M)
    defect = labels != 0
    np.savetxt(run.embeddings, Z[defect], delimiter=",", fmt="%.17g")
    # class ids for estimate-k: base classes keep their id, the rest are unlabeled
    np.savetxt(run.labels, labels[defect], fmt="%d")
    return {"steps": d.pretrain_steps, "embedded": int(defect.sum()),
            "frozen_before": before, "frozen_after": frozen_digest(ts.student)}


def read_embeddings(path):
    Z = np.loadtxt(path, delimiter=",", ndmin=2)
    return Z


def estimate_k_stage(run, embeddings=None, labels=None):
    d = run.config.discovery
    embeddings = Path(embeddings or run.embeddings)
    labels = Path(labels or run.labels)
    run.require("estimate-k", embeddings, "pretrain")
    run.require("estimate-k", labels, "pretrain")
    est = estimate_k_file(embeddings, labels, d.k_min, d.k_max, run.config.seed, d.k_restarts)
    _dump(run.k_file, est)
    return {"k_hat": est["k_hat"], "c_u": est["c_u"]}


def estimate_k_file(embeddings, labels, k_min, k_max, seed, restarts=3):
    """K̂ from a CSV of unit embeddings and a file of integer labels (−1 = unlabeled)."""
    Z = read_embeddings(embeddings)
    y = np.loadtxt(labels, dtype=np.int64, ndmin=1)
    est = class_count.estimate_k(Z, y, (k_min, k_max), seed=seed, restarts=restarts)
    return {"k_hat": int(est.k_hat), "c_u": int(est.c_u),
            "acc_curve": [[int(k), float(a)] for k, a in est.acc_curve]}


def train_classifier_stage(run):
    """Configure the head from K̂ and train it with the teacher–student loop."""
    d = run.config.discovery
    run.require("train-classifier", run.k_file, "estimate-k")
    run.require("train-classifier", run.checkpoints / "encoder.ckpt", "pretrain")
    train, _ = _train_entries(run, "train-classifier")
    X, M = _crop_arrays(run, "train-classifier", train)
    n_base = run.config.corpus_config().n_base
    labels = _head_labels(train, n_base)
    est = _load(run.k_file)
    ts, _ = classifier.load_classifier(run.checkpoints / "encoder.ckpt")
    ts.configure_head(classifier.HeadConfig(n_base, max(est["k_hat"] - n_base, 0)),
                      np.random.default_rng(np.random.SeedSequence([run.config.seed, 9])))
    before = frozen_digest(ts.student)
    losses = []
    for step, idx in enumerate(_batches(labels, ts.hyper.batch, d.unlabeled_share, d.steps,
                                        run.config.seed + 1)):
        loss, _ = classifier.distill_step(ts, classifier.CropBatch(X[idx], M[idx], labels[idx]),
                                          step, stage=d.stage)
        losses.append(loss)
    classifier.save_classifier(ts, run.checkpoints / "classifier.ckpt", extra={"k_hat": est["k_hat"]})
    return {"steps": d.steps, "final_loss": losses[-1] if losses else None,
            "frozen_before": before, "frozen_after": frozen_digest(ts.student)}


def _detection_metrics(run, manifest):
    index = _load(run.scores / "index.json")
    test = [r for r in manifest.select("test") if r.path in index]
    y = np.array([r.label is not None for r in test])
    out = {"i_auroc": None, "p_auroc": None, "mask_iou": None}
    if not test:
        return out
    if y.any() and (~y).any():
        out["i_auroc"] = auroc([index[r.path]["image_score"] for r in test], y)
    maps, gts, ious = [], [], []
    for r in test:
        R = _score_map(run, index, r)
        gt = manifest.mask(r)
        gt = np.zeros_like(R) if gt is None else gt
        maps.append(R)
        gts.append(gt > 0)
        if r.label is not None:
            pred = read_pgm(run.masks / f"{_stem(r)}.pgm") > 0
            ious.append(binarizer.iou(pred, gt > 0))
    gts = np.stack(gts)
    if gts.any() and (~gts).any():
        out["p_auroc"] = pixel_auroc(np.stack(maps), gts)
    if ious:
        out["mask_iou"] = float(np.mean(ious))
    return out


def eval_stage(run):
    manifest = run.manifest("eval")
    run.require("eval", run.scores / "index.json", "score")
    run.require("eval", run.crops / "index.json", "binarize")
    run.require("eval", run.checkpoints / "classifier.ckpt", "train-classifier")
    metrics = _detection_metrics(run, manifest)
    ts, extra = classifier.load_classifier(run.checkpoints / "classifier.ckpt")
    _, test = _train_entries(run, "eval")
    metrics.update(nmi=None, ari=None, f1=None, k_hat=extra.get("k_hat"))
    if test:
        X, M = _crop_arrays(run, "eval", test)
        probs = classifier.predict(ts, X, M)
        pred = probs.argmax(axis=1)
        truth = np.array([e["label"] for e in test])
        table = contingency(pred, truth)
        metrics.update(nmi=nmi(table), ari=ari(table), f1=f1_hungarian(pred, truth))
        names = manifest.class_names
        with open(run.predictions, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "crop", "class_id", "class_name", "confidence"])
            for e, k, p in zip(test, pred, probs):
                w.writerow([e["source"], 0, int(k), _head_name(int(k), names, ts.head_config),
                            f"{p[k]:.6f}"])
    _dump(run.metrics, metrics)
    return {k: v for k, v in metrics.items() if k != "mask_iou"}


def _head_name(k, names, hc):
    if k == 0:
        return "defect-free"
    if k <= hc.c_labeled:
        return names.get(k, names.get(str(k), f"class{k}"))
    return f"novel{k - hc.c_labeled}"


STAGE_FUNCS = {
    "gen-data": gen_data,
    "train-detector": train_detector_stage,
    "score": score_stage,
    "binarize": binarize_stage,
    "pretrain": pretrain_stage,
    "estimate-k": estimate_k_stage,
    "train-classifier": train_classifier_stage,
    "eval": eval_stage,
}


def run_stage(run, stage, **kw):
    t0 = time.perf_counter()
    info = STAGE_FUNCS[stage](run, **kw) or {}
    run.record(stage, time.perf_counter() - t0, **info)
    log.info("%s done: %s", stage, info)
    return info


def run_pipeline(config: RunConfig, root):
    """Execute every stage in order into ``root``; returns the metrics dict."""
    run = Run(root, config)
    run.save_config()
    for stage in STAGES:
        run_stage(run, stage)
    return _load(run.metrics)
