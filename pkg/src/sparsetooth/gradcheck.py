"""Central finite-difference checks of the hand-written gradients.

ReLU kinks make a finite difference meaningless when the perturbation flips
a pre-activation's sign, so such coordinates are redrawn and counted.
"""
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, background_loss, coseg_loss, fg_loss, total_loss
from .segnet import backward, forward, relu_pattern

LOSS_NAMES = ("coseg", "fg", "bg", "total")


@dataclass
class GradCheckResult:
    loss: str
    rel_errors: np.ndarray
    skipped_kinks: int

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max())


def make_objective(which, geo, labels, labeled, fg_groups, bg_indices, epoch, cfg: LossConfig):
    """Returns ``f(params) -> (prediction, LossTerm)`` for one of the named losses."""

    def f(params):
        pred = forward(geo, params)
        co = coseg_loss(pred.logits, pred.confidence, labels, labeled, cfg.coseg_norm)
        if which == "coseg":
            return pred, co
        fg = fg_loss(pred.embedding, fg_groups, cfg.temperature)
        if which == "fg":
            return pred, fg
        bg = background_loss(pred.logits, bg_indices)
        if which == "bg":
            return pred, bg
        _, tot = total_loss(co, fg, bg, epoch, cfg)
        return pred, tot

    return f


def fd_noise_floor(value, h):
    """Rounding error of a central difference of a loss near ``value``.

    Each evaluation is exact to about one ulp, so the difference quotient
    carries an absolute error of about ``ulp(value) / h``.
    """
    return float(np.spacing(abs(value))) / h


def check_gradients(objective, params, n_coords, rng, h=1e-5, max_tries=None, with_floor=False):
    """Relative errors ``|analytic - fd| / (|fd| + 1e-12)`` on random parameter coordinates.

    With ``with_floor`` a third array gives each coordinate's relative error
    attributable to f64 rounding alone (:func:`fd_noise_floor` over ``|fd|``).
    """
    pred, term = objective(params)
    grads = backward(pred, params, term.dlogits, term.dconfidence, term.dembedding)
    pattern = relu_pattern(pred)
    names = params.names()
    sizes = np.array([params[n].size for n in names])
    probs = sizes / sizes.sum()
    errs, floors, skipped = [], [], 0
    noise = fd_noise_floor(term.value, h)
    max_tries = max_tries or 20 * n_coords
    tries = 0
    while len(errs) < n_coords:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"too many kinks: {skipped} skipped")
        name = names[rng.choice(len(names), p=probs)]
        i = int(rng.integers(params[name].size))
        plus = params.copy()
        plus.tensors[name].flat[i] += h
        minus = params.copy()
        minus.tensors[name].flat[i] -= h
        pp, lp = objective(plus)
        pm, lm = objective(minus)
        if not (np.array_equal(relu_pattern(pp), pattern) and np.array_equal(relu_pattern(pm), pattern)):
            skipped += 1
            continue
        fd = (lp.value - lm.value) / (2 * h)
        a = grads[name].flat[i]
        errs.append(abs(a - fd) / (abs(fd) + 1e-12))
        floors.append(noise / (abs(fd) + 1e-12))
    if with_floor:
        return np.array(errs), skipped, np.array(floors)
    return np.array(errs), skipped
