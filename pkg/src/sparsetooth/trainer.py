"""Training loop with warmup gating, AdamW, evaluation metrics and k-NN upsampling."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .camera import default_cameras, render
from .losses import (LossConfig, background_loss, coseg_loss, fg_loss, mrl_active,
                     total_loss)
from .maskoracle import ExternalOracle, GroundTruthOracle, OracleNoiseConfig
from .mrl import mask_guidance, subsample_groups
from .segnet import NetDims, backward, forward, init_params, prepare, save_params, zeros_like
from .synthgen import sample_sparse_labels

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class PlantedOutliers:
    """Low-confidence mispredictions injected into the predictions seen by the prompter.

    For every tooth class, ``fraction * |tooth|`` gingiva points lying farther
    than ``min_distance`` from the tooth are re-labelled as that tooth with
    confidence ``confidence``. Losses never see the planted values.
    """

    fraction: float = 0.0
    confidence: float = 0.2
    min_distance: float = 15.0
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    loss: LossConfig = LossConfig()
    dims: NetDims = NetDims()
    oracle: str = "gt"  # "gt" or "external"
    oracle_command: str = ""
    noise: OracleNoiseConfig = OracleNoiseConfig()
    views: int = 1
    image_size: tuple = (128, 128)
    splat_radius: int = 1
    union_views: bool = False
    prompt_mode: str = "cpg"  # "cpg" or "agg"
    mask_refresh: int = 1
    labels_per_tooth: int = 1
    planted: PlantedOutliers = PlantedOutliers()
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.prompt_mode not in ("cpg", "agg"):
            raise ValueError("prompt_mode must be 'cpg' or 'agg'")
        if self.oracle not in ("gt", "external"):
            raise ValueError("oracle must be 'gt' or 'external'")
        if self.mask_refresh < 1:
            raise ValueError("mask_refresh must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"loss": LossConfig, "dims": NetDims, "noise": OracleNoiseConfig, "planted": PlantedOutliers}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if "image_size" in d:
            d["image_size"] = tuple(int(x) for x in d["image_size"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adamw_init(params):
    return AdamState({k: np.zeros_like(x) for k, x in params.tensors.items()},
                     {k: np.zeros_like(x) for k, x in params.tensors.items()})


def adamw_step(params, grads, state: AdamState, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, p in params.tensors.items():
        g = grads.tensors[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps) + lr * wd * p
        p -= update
    return params, state


# --------------------------------------------------------------------------- metrics

DEFAULT_BUCKETS_14 = {
    "Molar": [1, 2, 13, 14],
    "Premolar": [3, 4, 11, 12],
    "Canine": [5, 10],
    "Incisor": [6, 7, 8, 9],
    "Gingiva": [0],
}


def default_buckets(num_classes):
    if num_classes == 15:
        return DEFAULT_BUCKETS_14
    return {"Teeth": list(range(1, num_classes)), "Gingiva": [0]}


@dataclass
class Metrics:
    per_class_iou: dict
    per_class_dsc: dict
    miou: float
    dsc: float
    acc: float
    grouped_iou: dict = field(default_factory=dict)

    def rows(self):
        out = [("mIoU", self.miou), ("DSC", self.dsc), ("Acc", self.acc)]
        out += [(f"IoU_{name}", v) for name, v in self.grouped_iou.items()]
        out += [(f"IoU_class_{c}", v) for c, v in sorted(self.per_class_iou.items())]
        return out


def confusion_matrix(gt, pred, num_classes):
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(cm, buckets=None):
    """IoU/DSC per class; classes absent from both prediction and ground truth are left out."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    iou, dsc = {}, {}
    for c in range(cm.shape[0]):
        denom = tp[c] + fp[c] + fn[c]
        if denom == 0:
            continue
        iou[c] = tp[c] / denom
        dsc[c] = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])
    total = cm.sum()
    grouped = {}
    for name, classes in (buckets or {}).items():
        vals = [iou[c] for c in classes if c in iou]
        if vals:
            grouped[name] = float(np.mean(vals))
    return Metrics(
        per_class_iou={c: float(v) for c, v in iou.items()},
        per_class_dsc={c: float(v) for c, v in dsc.items()},
        miou=float(np.mean(list(iou.values()))) if iou else 0.0,
        dsc=float(np.mean(list(dsc.values()))) if dsc else 0.0,
        acc=float(np.trace(cm) / total) if total else 0.0,
        grouped_iou=grouped,
    )


def knn_interpolate(values, sample_positions, full_positions, k=3):
    """Inverse-distance (``1/(d + 1e-8)``) mean of the ``k`` nearest samples' values.

    A query that coincides with samples takes their values unweighted.
    """
    values = np.asarray(values, dtype=np.float64)
    k = min(k, len(values))
    idx, dist = kernels.knn_query(sample_positions, full_positions, k)
    w = 1.0 / (dist + 1e-8)
    exact = dist == 0
    has_exact = exact.any(axis=1)
    w[has_exact] = exact[has_exact].astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("qk,qkc->qc", w, values[idx])


def predict_labels(params, scan, sample_points=None, seed=0, geometry=None):
    """Argmax labels for every point; optionally infer on a subsample and upsample with 3-NN."""
    if sample_points is None or sample_points >= scan.num_points:
        geo = geometry if geometry is not None else prepare(scan, params.dims.k_neighbors)
        return forward(geo, params, keep_cache=False).labels()
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(scan.num_points, size=sample_points, replace=False))
    sub = _subset(scan, keep)
    logits = forward(prepare(sub, params.dims.k_neighbors), params, keep_cache=False).logits
    full = knn_interpolate(logits, sub.positions, scan.positions, k=3)
    return np.argmax(full, axis=1)


def _subset(scan, keep):
    from .synthgen import LabeledScan

    return LabeledScan(
        positions=scan.positions[keep],
        class_labels=scan.class_labels[keep],
        instance_ids=scan.instance_ids[keep],
        num_classes=scan.num_classes,
        normals=None if scan.normals is None else scan.normals[keep],
    )


def evaluate(params, scans, buckets=None, sample_points=None):
    """Metrics pooled over all points of all scans."""
    if not scans:
        raise ValueError("evaluate needs at least one scan")
    nc = scans[0].num_classes
    cm = np.zeros((nc, nc), dtype=np.int64)
    for i, scan in enumerate(scans):
        pred = predict_labels(params, scan, sample_points, seed=i)
        cm += confusion_matrix(scan.class_labels, pred, nc)
    return metrics_from_confusion(cm, buckets if buckets is not None else default_buckets(nc))


def write_metrics_csv(metrics: Metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, v in metrics.rows():
            w.writerow([name, repr(float(v))])


# --------------------------------------------------------------------------- training

LOG_FIELDS = ["epoch", "scan_id", "coseg", "fg", "bg", "total", "active_coseg", "active_fg", "active_bg"]


@dataclass
class TrainResult:
    params: object
    log_rows: list
    oracle_calls: int
    guidance_stats: list = field(default_factory=list)


def planted_outliers(scan, spec: PlantedOutliers, scan_id=0):
    """``{tooth_class: gingiva point indices}`` to be mislabelled as that tooth."""
    if spec.fraction <= 0:
        return {}
    rng = np.random.default_rng([spec.seed, scan_id])
    pos = scan.positions.astype(np.float64)
    ging = np.flatnonzero(scan.class_labels == 0)
    cents = scan.tooth_centroids()
    out = {}
    for k in range(1, scan.num_classes):
        far = ging[np.linalg.norm(pos[ging] - cents[k - 1], axis=1) > spec.min_distance]
        m = int(round(spec.fraction * np.sum(scan.class_labels == k)))
        if m and far.size:
            out[k] = np.sort(rng.choice(far, size=min(m, far.size), replace=False))
    return out


def apply_planted(logits, confidence, planted, planted_confidence, margin=10.0):
    """Copies of ``logits``/``confidence`` with the planted points forced to their tooth class."""
    logits = logits.copy()
    conf = confidence.copy()
    for k, ix in planted.items():
        logits[ix, k] = logits[ix].max(axis=1) + margin
        conf[ix] = planted_confidence
    return logits, conf


def make_oracle(cfg: TrainConfig, workdir=None):
    if cfg.oracle == "external":
        if not cfg.oracle_command:
            raise ValueError("external oracle selected without oracle_command")
        return ExternalOracle(cfg.oracle_command, workdir=workdir)
    return GroundTruthOracle(cfg.noise)


class _ScanCache:
    def __init__(self, scans, cfg):
        self.scans = scans
        self.cfg = cfg
        self._geo = {}
        self._views = {}
        self._planted = {}

    def geometry(self, i):
        if i not in self._geo:
            self._geo[i] = prepare(self.scans[i], self.cfg.dims.k_neighbors)
        return self._geo[i]

    def views(self, i):
        if i not in self._views:
            cams = default_cameras(self.scans[i], self.cfg.views, self.cfg.image_size)
            self._views[i] = [render(self.scans[i], c, self.cfg.splat_radius, view_id=j)
                              for j, c in enumerate(cams)]
        return self._views[i]

    def planted(self, i):
        if i not in self._planted:
            self._planted[i] = planted_outliers(self.scans[i], self.cfg.planted, i)
        return self._planted[i]


def scan_step(pred, scan, labeled, groups, epoch, cfg: TrainConfig, rng):
    """Loss terms for one scan; ``groups`` is a list of ReprojectedGroups (or None before MRL)."""
    lc = cfg.loss
    co = coseg_loss(pred.logits, pred.confidence, scan.class_labels, labeled, lc.coseg_norm)
    fg = bg = None
    if groups is not None:
        fg_terms = []
        for g in groups:
            idx = subsample_groups(g.fg_indices(), lc.max_group_points, rng)
            fg_terms.append(fg_loss(pred.embedding, idx, lc.temperature))
        live = [t for t in fg_terms if t.warning is None] or fg_terms[:1]
        fg = live[0]
        if len(live) > 1:
            fg.value = float(np.mean([t.value for t in live]))
            fg.dembedding = sum(t.dembedding for t in live) / len(live)
        bg_idx = np.unique(np.concatenate([g.bg_indices for g in groups])) if groups else np.zeros(0, int)
        bg = background_loss(pred.logits, bg_idx)
    return total_loss(co, fg, bg, epoch, lc)


def train(scans, cfg: TrainConfig, out_dir=None, oracle=None, sparse=None) -> TrainResult:
    """Optimize from sparse labels; MRL terms switch on after ``cfg.loss.warmup_epochs`` epochs."""
    if not scans:
        raise ValueError("empty training set")
    dims = cfg.dims
    if dims.num_classes != scans[0].num_classes:
        dims = NetDims(**{**asdict(dims), "num_classes": scans[0].num_classes})
    params = init_params(dims, cfg.seed)
    state = adamw_init(params)
    cache = _ScanCache(scans, cfg)
    if sparse is None:
        sparse = [sample_sparse_labels(s, cfg.labels_per_tooth, seed=[cfg.seed, i]).labeled_indices
                  for i, s in enumerate(scans)]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    oracle = oracle if oracle is not None else make_oracle(
        cfg, None if out_dir is None else out_dir / "oracle_work")

    rows, stats = [], []
    group_cache = {}
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scans))
        use_mrl = mrl_active(epoch, cfg.loss) and (cfg.loss.lambda2 > 0 or cfg.loss.lambda3 > 0)
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            grad_sum = zeros_like(params)
            for i in batch:
                i = int(i)
                scan = scans[i]
                pred = forward(cache.geometry(i), params)
                groups = None
                if use_mrl:
                    cached = group_cache.get(i)
                    if cached is None or epoch - cached[0] >= cfg.mask_refresh:
                        plogits, pconf = pred.logits, pred.confidence
                        if cache.planted(i):
                            plogits, pconf = apply_planted(plogits, pconf, cache.planted(i),
                                                           cfg.planted.confidence)
                        view_pred = _PromptView(plogits, pconf)
                        _, _, groups = mask_guidance(view_pred, scan, cache.views(i), oracle,
                                                     cfg.loss.tau, cfg.prompt_mode, cfg.union_views)
                        group_cache[i] = (epoch, groups)
                        stats.append({"epoch": epoch, "scan_id": i,
                                      "groups": len(groups[0].fg_groups) if groups else 0})
                    groups = group_cache[i][1]
                rng = np.random.default_rng([cfg.seed, epoch, i])
                report, term = scan_step(pred, scan, sparse[i], groups, epoch, cfg, rng)
                if not np.isfinite(report.total):
                    _dump_divergence(out_dir, params, epoch, i, report)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scan {i}: {report}")
                g = backward(pred, params, term.dlogits, term.dconfidence, term.dembedding)
                for k in grad_sum.tensors:
                    grad_sum.tensors[k] += g.tensors[k]
                act = report.active_terms
                rows.append([epoch, i, report.coseg, report.fg, report.bg, report.total,
                             int(act["coseg"]), int(act["fg"]), int(act["bg"])])
            for k in grad_sum.tensors:
                grad_sum.tensors[k] /= len(batch)
            adamw_step(params, grad_sum, state, cfg.learning_rate, cfg.weight_decay)
        if out_dir is not None:
            log.info("epoch %d done", epoch)

    if out_dir is not None:
        save_params(params, out_dir / "final.wsnn")
        write_log_csv(rows, out_dir / "train_log.csv")
    return TrainResult(params, rows, getattr(oracle, "calls", 0), stats)


@dataclass
class _PromptView:
    logits: np.ndarray
    confidence: np.ndarray


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:6]] + r[6:])


def read_log_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _dump_divergence(out_dir, params, epoch, scan_id, report):
    if out_dir is None:
        return
    d = out_dir / "divergence"
    d.mkdir(parents=True, exist_ok=True)
    save_params(params, d / "params.wsnn")
    (d / "state.json").write_text(json.dumps(
        {"epoch": epoch, "scan_id": scan_id, "coseg": report.coseg, "fg": report.fg,
         "bg": report.bg, "total": report.total}, default=str, indent=2))
