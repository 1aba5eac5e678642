"""Symmetric batch-contrastive objectives and the matching-accuracy diagnostic.

The core loss over two aligned feature batches FA, FB (rows paired by index)
is the mean of the row-wise and column-wise softmax cross-entropies of the
similarity matrix FA @ FB.T / tau. Both orientations are computed explicitly
so the value and gradients are bit-identical under argument swap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import numkit as nk
from .errors import ConfigError, ShapeError
from .numkit import GradPair


@dataclass(frozen=True)
class LossConfig:
    """Temperature dividing similarities before the softmax."""

    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def _aligned_pair(fa, fb) -> tuple[np.ndarray, np.ndarray]:
    a = nk.as_f64(fa, "feature batch")
    b = nk.as_f64(fb, "feature batch")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"feature batches must be 2-D, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"feature batches must align row-for-row: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ShapeError("feature batches need at least one row")
    return a, b


def contrastive_loss(fa, fb, cfg: LossConfig) -> GradPair:
    """Symmetric InfoNCE over aligned batches; backward(g) -> (d_fa, d_fb)."""
    a, b = _aligned_pair(fa, fb)
    n = a.shape[0]
    s_ab = (a @ b.T) / cfg.tau
    s_ba = (b @ a.T) / cfg.tau
    lse_ab = nk.logsumexp_rows(s_ab)
    lse_ba = nk.logsumexp_rows(s_ba)
    # each orientation reduced on its own keeps the value swap-symmetric bitwise
    term_ab = float(np.sum(lse_ab) - np.trace(s_ab))
    term_ba = float(np.sum(lse_ba) - np.trace(s_ba))
    value = (term_ab + term_ba) / (2.0 * n)

    def backward(g=1.0):
        scale = float(g) / (2.0 * n * cfg.tau)
        p_ab = np.exp(s_ab - lse_ab[:, None])
        p_ba = np.exp(s_ba - lse_ba[:, None])
        eye = np.eye(n)
        d_fa = scale * (((p_ab - eye) + (p_ba - eye).T) @ b)
        d_fb = scale * (((p_ba - eye) + (p_ab - eye).T) @ a)
        return d_fa, d_fb

    return GradPair(value, backward)


def realign_loss(f_img_adapted, f_text, cfg: LossConfig) -> GradPair:
    """Contrastive loss between adapted image features and frozen text features.

    Text features receive no gradient; backward(g) -> (d_img_adapted,).
    """
    inner = contrastive_loss(f_img_adapted, f_text, cfg)

    def backward(g=1.0):
        d_img, _ = inner.backward(g)
        return (d_img,)

    return GradPair(inner.value, backward)


class TrimodalLoss(NamedTuple):
    value: float
    text_term: float
    image_term: float
    backward: Callable[..., tuple]


def trimodal_loss(f_sp, f_text, f_vp, views: Sequence, cfg: LossConfig) -> TrimodalLoss:
    """contrastive(f_sp, f_text) + mean_k contrastive(f_vp, view_k).

    Image and text features are frozen inputs; backward(g) -> (d_f_sp, d_f_vp).
    """
    if len(views) == 0:
        raise ConfigError("trimodal_loss needs at least one image view")
    text_pair = contrastive_loss(f_sp, f_text, cfg)
    view_pairs = [contrastive_loss(f_vp, v, cfg) for v in views]
    m = len(view_pairs)
    image_term = 0.0
    for pair in view_pairs:
        image_term += pair.value
    image_term /= m
    value = text_pair.value + image_term

    def backward(g=1.0):
        d_sp, _ = text_pair.backward(g)
        d_vp = None
        for pair in view_pairs:
            d, _ = pair.backward(g)
            d_vp = d if d_vp is None else d_vp + d
        return d_sp, d_vp / m

    return TrimodalLoss(value, text_pair.value, image_term, backward)


def contrastive_accuracy(fa, fb, direction: str = "image_to_text") -> float:
    """Fraction of rows whose matched partner is strictly the nearest.

    ``image_to_text`` compares each FA row against all FB rows (ties count as
    failures); ``text_to_image`` flips that; ``mean`` averages both.
    """
    a, b = _aligned_pair(fa, fb)
    n = a.shape[0]
    if n < 2:
        raise ConfigError("contrastive_accuracy needs at least two pairs")
    if direction not in ("image_to_text", "text_to_image", "mean"):
        raise ConfigError(f"unknown direction {direction!r}")
    scores = a @ b.T
    diag = np.diag(scores).copy()
    rivals = scores.copy()
    np.fill_diagonal(rivals, -np.inf)
    acc_row = float(np.mean(diag > rivals.max(axis=1)))
    if direction == "image_to_text":
        return acc_row
    acc_col = float(np.mean(diag > rivals.max(axis=0)))
    if direction == "text_to_image":
        return acc_col
    return 0.5 * (acc_row + acc_col)
