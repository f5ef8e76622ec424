"""Training objectives and their exact gradients.

* confidence-aware segmentation loss on the sparsely labeled points
* supervised contrastive loss between re-projected mask groups
* background cross-entropy toward class 0
* the warmup-gated weighted total
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)


class SupervisionError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.6
    temperature: float = 0.1
    warmup_epochs: int = 10
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    coseg_norm: str = "labeled"  # "labeled": 1/|P_label|, "all": 1/N
    max_group_points: int = 64

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.coseg_norm not in ("labeled", "all"):
            raise ValueError("coseg_norm must be 'labeled' or 'all'")
        if self.max_group_points < 1:
            raise ValueError("max_group_points must be >= 1")


@dataclass
class LossTerm:
    """A scalar loss plus its gradients w.r.t. the prediction fields it reads."""

    value: float
    dlogits: np.ndarray | None = None
    dconfidence: np.ndarray | None = None
    dembedding: np.ndarray | None = None
    warning: str | None = None


def log_softmax(logits):
    return logits - logsumexp(logits, axis=1, keepdims=True)


def cross_entropy(logits, targets):
    """Per-row softmax cross-entropy and the gradient of each row's CE w.r.t. its logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    lsm = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    ce = -lsm[rows, targets]
    grad = np.exp(lsm)
    grad[rows, targets] -= 1.0
    return ce, grad


def coseg_loss(logits, confidence, labels, labeled_indices, norm="labeled"):
    """``(1/Z) sum_i [c_i CE_i + (1 - c_i)^2]`` over the labeled points.

    ``Z`` is the number of labeled points (``norm="labeled"``) or the number
    of points in the scan (``norm="all"``).
    """
    idx = np.asarray(labeled_indices, dtype=np.int64)
    if idx.size == 0:
        raise SupervisionError("no labeled points")
    n = logits.shape[0]
    z = idx.size if norm == "labeled" else n
    ce, dce = cross_entropy(logits[idx], np.asarray(labels)[idx])
    c = confidence[idx]
    value = float(np.sum(c * ce + (1.0 - c) ** 2) / z)

    dlogits = np.zeros_like(logits, dtype=np.float64)
    np.add.at(dlogits, idx, dce * (c / z)[:, None])
    dconf = np.zeros(n)
    np.add.at(dconf, idx, (ce - 2.0 * (1.0 - c)) / z)
    return LossTerm(value, dlogits=dlogits, dconfidence=dconf)


def contrastive_fg(groups, temperature=0.1):
    """Contrastive loss between feature groups.

    ``groups`` is a list of ``(n_g, E)`` arrays. Features are L2-normalized.
    Every ordered pair ``(i, j)`` of distinct features from one group is a
    positive; its term is ``-log(e^{s_ij} / (e^{s_ij} + sum_k e^{s_ik}))``
    with ``s = f.f / t`` and ``k`` running over all features of other
    groups. The loss is the mean over positive pairs.

    Returns ``(value, grads, warning)``, ``grads`` matching ``groups``.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    groups = [g if g.ndim == 2 else g.reshape(len(g), -1) for g in groups]
    zero = [np.zeros_like(g) for g in groups]
    nonempty = [g for g in groups if g.shape[0] > 0]
    if len(nonempty) < 2:
        return 0.0, zero, "fewer than two groups: no contrast"

    sizes = np.array([g.shape[0] for g in groups])
    gid = np.repeat(np.arange(len(groups)), sizes)
    raw = np.concatenate(groups)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms = np.where(norms > 0, norms, 1.0)
    f = raw / norms
    s = (f @ f.T) / temperature

    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_pairs = int(np.sum(sizes * (sizes - 1)))
    if n_pairs == 0:
        return 0.0, zero, "no positive pairs: every group has one feature"
    C = 1.0 / n_pairs

    # Positives only live in the diagonal group blocks. Each row is shifted by
    # its largest off-diagonal similarity; if a denominator still underflows,
    # fall back to a slower pure log-space evaluation.
    s_off = s.copy()
    np.fill_diagonal(s_off, -np.inf)
    m = s_off.max(axis=1, keepdims=True)
    E = np.exp(s_off - m)
    blocks = []
    for g in range(len(groups)):
        lo, hi = offsets[g], offsets[g + 1]
        blocks.append(E[lo:hi, lo:hi].copy())
        E[lo:hi, lo:hi] = 0.0  # E now holds negatives only
    neg_sum = E.sum(axis=1)
    value = 0.0
    row_w = np.zeros(len(gid))
    pos_ds = []
    ok = True
    for g, Eb in enumerate(blocks):
        lo, hi = offsets[g], offsets[g + 1]
        n = hi - lo
        if n < 2:
            pos_ds.append(None)
            continue
        off = ~np.eye(n, dtype=bool)
        den = np.where(off, Eb + neg_sum[lo:hi, None], 1.0)
        if den.min() < 1e-200:
            ok = False
            break
        value += np.sum(np.where(off, np.log(den) + m[lo:hi] - s[lo:hi, lo:hi], 0.0))
        inv = np.where(off, 1.0 / den, 0.0)
        row_w[lo:hi] = inv.sum(axis=1)
        pos_ds.append(np.where(off, Eb * inv - 1.0, 0.0))
    if ok:
        value = float(C * value)
        # each positive (i, j) pushes on every negative k of anchor i with weight E_ik / den_ij
        ds = E * row_w[:, None]
        for g, blk in enumerate(pos_ds):
            if blk is not None:
                lo, hi = offsets[g], offsets[g + 1]
                ds[lo:hi, lo:hi] = blk
    else:
        same = gid[:, None] == gid[None, :]
        value, ds = _contrastive_logspace(s, same & ~np.eye(len(gid), dtype=bool), ~same, C)
    ds *= C
    df = (ds + ds.T) @ f / temperature
    draw = (df - f * np.sum(f * df, axis=1, keepdims=True)) / norms

    grads, start = [], 0
    for size in sizes:
        grads.append(draw[start:start + size])
        start += size
    return value, grads, None


def _contrastive_logspace(s, pos, neg, C):
    s_neg = np.where(neg, s, -np.inf)
    log_neg = logsumexp(s_neg, axis=1, keepdims=True)  # -inf if anchor has no negatives
    log_den = np.logaddexp(s, log_neg)
    value = float(C * np.sum(np.where(pos, log_den - s, 0.0)))
    ds = np.where(pos, np.exp(s - log_den) - 1.0, 0.0)
    # each positive (i, j) pushes on every negative k of anchor i with weight e^{s_ik - log_den_ij}
    log_w = logsumexp(np.where(pos, -log_den, -np.inf), axis=1, keepdims=True)
    ds += np.where(neg, np.exp(s_neg + log_w), 0.0)
    return value, ds


def fg_loss(embedding, group_indices, temperature=0.1):
    """Contrastive loss over embedding rows picked by ``group_indices`` (list of index arrays)."""
    groups = [embedding[np.asarray(ix, dtype=np.int64)] for ix in group_indices]
    value, grads, warning = contrastive_fg(groups, temperature)
    demb = np.zeros_like(embedding, dtype=np.float64)
    for ix, gr in zip(group_indices, grads):
        np.add.at(demb, np.asarray(ix, dtype=np.int64), gr)
    if warning:
        log.debug("fg loss: %s", warning)
    return LossTerm(value, dembedding=demb, warning=warning)


def background_loss(logits, bg_indices):
    """Mean cross-entropy of ``logits[bg_indices]`` against class 0."""
    idx = np.asarray(bg_indices, dtype=np.int64)
    dlogits = np.zeros_like(logits, dtype=np.float64)
    if idx.size == 0:
        return LossTerm(0.0, dlogits=dlogits, warning="empty background set")
    ce, dce = cross_entropy(logits[idx], np.zeros(idx.size, dtype=np.int64))
    np.add.at(dlogits, idx, dce / idx.size)
    return LossTerm(float(ce.mean()), dlogits=dlogits)


@dataclass
class LossReport:
    coseg: float
    fg: float
    bg: float
    total: float
    active_terms: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def mrl_active(epoch, cfg: LossConfig):
    """Indicator ``[epoch > T]`` with 1-based epochs."""
    return epoch > cfg.warmup_epochs


def total_loss(coseg: LossTerm, fg: LossTerm | None, bg: LossTerm | None, epoch, cfg: LossConfig):
    """``lambda1 coseg + [epoch > T] (lambda2 fg + lambda3 bg)``; returns (report, combined LossTerm)."""
    on = mrl_active(epoch, cfg)
    fg_v = fg.value if fg is not None else 0.0
    bg_v = bg.value if bg is not None else 0.0
    total = cfg.lambda1 * coseg.value
    if on:
        total += cfg.lambda2 * fg_v + cfg.lambda3 * bg_v
    active = {
        "coseg": cfg.lambda1 > 0,
        "fg": bool(on and fg is not None and cfg.lambda2 > 0),
        "bg": bool(on and bg is not None and cfg.lambda3 > 0),
    }
    warnings = [t.warning for t in (coseg, fg, bg) if t is not None and t.warning]
    report = LossReport(coseg.value, fg_v, bg_v, total, active, warnings)

    def scaled(arr, w):
        return None if arr is None else w * arr

    def acc(a, b):
        if a is None:
            return b
        return a if b is None else a + b

    dlogits = scaled(coseg.dlogits, cfg.lambda1)
    dconf = scaled(coseg.dconfidence, cfg.lambda1)
    demb = None
    if on:
        if fg is not None:
            demb = scaled(fg.dembedding, cfg.lambda2)
            dlogits = acc(dlogits, scaled(fg.dlogits, cfg.lambda2))
        if bg is not None:
            dlogits = acc(dlogits, scaled(bg.dlogits, cfg.lambda3))
    return report, LossTerm(total, dlogits=dlogits, dconfidence=dconf, dembedding=demb)
