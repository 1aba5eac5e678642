"""Downstream protocols: zero-shot classification against class text
embeddings, linear probing on frozen dual features, episodic few-shot
probing, and cross-modal retrieval.

All evaluation is deterministic: ties break toward the lowest class id (or
gallery id), probes train full-batch from a zero init, and episode sampling
is a pure function of its trial seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import numkit as nk
from .adapters import AdapterParams, dual_forward
from .datagen import TripletSet
from .encoders import PointEncoderParams, encode_points
from .errors import ConfigError, ShapeError
from .numkit import GradPair
from .train import OptimState, adamw_step

QUERY_PER_CLASS = 20  # fixed by the episodic protocol, not configurable
PROBE_EPOCHS = 100
PROBE_LR = 1e-2

_MODES = {"both": "both", "iaa": "iaa", "iaa_only": "iaa", "taa": "taa", "taa_only": "taa"}


def canonical_mode(mode: str) -> str:
    if mode not in _MODES:
        raise ConfigError(f"unknown inference mode {mode!r}")
    return _MODES[mode]


@dataclass(frozen=True, eq=False)
class CategoryBank:
    """One unit-norm text-path embedding per class, ordered by class id."""

    class_ids: np.ndarray  # (C,)
    embeddings: np.ndarray  # (C, d)


def build_category_bank(data: TripletSet, class_ids: Sequence[int] | None = None) -> CategoryBank:
    """Per-class category embedding: the normalized mean text feature.

    Works for generated and externally ingested triplet files alike; for
    generated data the mean collapses onto the class-anchor embedding.
    """
    ids = np.asarray(sorted(set(np.unique(data.labels)) if class_ids is None else set(class_ids)), dtype=np.int64)
    if ids.size == 0:
        raise ConfigError("category bank needs at least one class")
    rows = []
    for c in ids:
        members = np.flatnonzero(data.labels == c)
        if members.size == 0:
            raise ConfigError(f"class {int(c)} has no samples to embed")
        rows.append(data.text_feats[members].mean(axis=0))
    return CategoryBank(ids, nk.l2_normalize(np.stack(rows)).value)


def dual_features(
    data: TripletSet,
    encoder: PointEncoderParams,
    iaa: AdapterParams,
    taa: AdapterParams,
    indices: np.ndarray,
    batch: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen forward pass: point features through both dual heads."""
    vp, sp = [], []
    for start in range(0, indices.size, batch):
        take = indices[start : start + batch]
        f_p = encode_points(data.points[take], encoder).value
        vp.append(dual_forward(f_p, iaa).value)
        sp.append(dual_forward(f_p, taa).value)
    d = encoder.out_dim
    if not vp:
        return np.zeros((0, d)), np.zeros((0, d))
    return np.concatenate(vp), np.concatenate(sp)


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------


def zeroshot_scores(f_vp, f_sp, bank: CategoryBank, mode: str = "both") -> np.ndarray:
    """Per-class similarity scores; ``both`` sums the two adapter scores."""
    mode = canonical_mode(mode)
    vp = np.atleast_2d(np.asarray(f_vp, dtype=np.float64))
    sp = np.atleast_2d(np.asarray(f_sp, dtype=np.float64))
    if vp.shape != sp.shape:
        raise ShapeError(f"dual feature batches disagree: {vp.shape} vs {sp.shape}")
    if mode == "iaa":
        return vp @ bank.embeddings.T
    if mode == "taa":
        return sp @ bank.embeddings.T
    return vp @ bank.embeddings.T + sp @ bank.embeddings.T


def zeroshot_classify(f_vp, f_sp, bank: CategoryBank, mode: str = "both") -> tuple[np.ndarray, np.ndarray]:
    """Predicted class ids plus the score matrix; ties go to the lowest id."""
    scores = zeroshot_scores(f_vp, f_sp, bank, mode)
    preds = bank.class_ids[np.argmax(scores, axis=1)]
    return preds, scores


def zeroshot_topk(
    f_vp,
    f_sp,
    labels,
    bank: CategoryBank,
    mode: str = "both",
    k_list: Sequence[int] = (1, 3, 5),
) -> dict[int, float]:
    """Top-k accuracy per k; ranking ties resolve toward the lowest class id."""
    n_classes = bank.class_ids.size
    for k in k_list:
        if not 1 <= k <= n_classes:
            raise ConfigError(f"top-k needs 1 <= k <= {n_classes}, got {k}")
    scores = zeroshot_scores(f_vp, f_sp, bank, mode)
    order = np.argsort(-scores, axis=1, kind="stable")
    ranked = bank.class_ids[order]
    hits = ranked == np.asarray(labels, dtype=np.int64)[:, None]
    return {int(k): float(np.mean(np.any(hits[:, :k], axis=1))) for k in k_list}


# ---------------------------------------------------------------------------
# Linear probing
# ---------------------------------------------------------------------------


def probe_layer_loss(x, w, b, labels) -> GradPair:
    """Mean softmax cross-entropy of logits x @ w + b; backward -> (dw, db)."""
    xm = nk.as_f64(x, "probe features")
    wm = nk.as_f64(w, "probe weights")
    bv = nk.as_f64(b, "probe bias")
    y = np.asarray(labels, dtype=np.int64)
    n = xm.shape[0]
    logits = xm @ wm + bv
    lse = nk.logsumexp_rows(logits)
    value = float(np.mean(lse - logits[np.arange(n), y]))

    def backward(g=1.0):
        probs = np.exp(logits - lse[:, None])
        probs[np.arange(n), y] -= 1.0
        probs *= float(g) / n
        return xm.T @ probs, probs.sum(axis=0)

    return GradPair(value, backward)


def train_probe(features, labels, n_classes: int, epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR):
    """Full-batch AdamW (no decay) on a single linear layer from a zero init."""
    x = np.asarray(features, dtype=np.float64)
    params = {"w": np.zeros((x.shape[1], n_classes)), "b": np.zeros(n_classes)}
    state = OptimState.zeros(params)
    for _ in range(epochs):
        loss = probe_layer_loss(x, params["w"], params["b"], labels)
        dw, db = loss.backward(1.0)
        params, state = adamw_step(params, {"w": dw, "b": db}, state, lr)
    return params["w"], params["b"]


def probe_accuracy(features, labels, w, b) -> float:
    logits = np.asarray(features, dtype=np.float64) @ w + b
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def linear_probe(
    features,
    labels,
    split_ratio: float = 0.8,
    probe_epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
    seed: int = 0,
) -> float:
    """Deterministic stratified split, train the linear layer, return test accuracy."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {split_ratio}")
    class_ids = np.unique(y)
    remap = {int(c): i for i, c in enumerate(class_ids)}
    train_idx, test_idx = [], []
    for c in class_ids:
        rows = np.flatnonzero(y == c)
        perm = np.random.default_rng([seed, int(c), 0x9B0E]).permutation(rows.size)
        n_train = max(1, int(round(split_ratio * rows.size)))
        train_idx.append(rows[perm[:n_train]])
        test_idx.append(rows[perm[n_train:]])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    y_train = np.array([remap[int(c)] for c in y[train_idx]])
    if np.unique(y_train).size < 2:
        raise ConfigError("probe training split covers fewer than two classes")
    if test_idx.size == 0:
        raise ConfigError("probe test split is empty; lower the split ratio")
    w, b = train_probe(x[train_idx], y_train, class_ids.size, probe_epochs, lr)
    y_test = np.array([remap[int(c)] for c in y[test_idx]])
    return probe_accuracy(x[test_idx], y_test, w, b)


# ---------------------------------------------------------------------------
# Few-shot episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EpisodeSpec:
    ways: int
    shots: int
    trial_seed: int
    support: np.ndarray  # (ways * shots,)
    query: np.ndarray  # (ways * QUERY_PER_CLASS,)


def fewshot_episode(labels, ways: int, shots: int, trial_seed: int) -> EpisodeSpec:
    """Sample ways classes, then shots + 20 instances per class without replacement."""
    y = np.asarray(labels, dtype=np.int64)
    class_ids = np.unique(y)
    if ways > class_ids.size:
        raise ConfigError(f"cannot pick {ways} ways from {class_ids.size} classes")
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng([0xEB15, int(trial_seed)])
    chosen = rng.choice(class_ids, size=ways, replace=False)
    support, query = [], []
    for c in chosen:
        rows = np.flatnonzero(y == c)
        need = shots + QUERY_PER_CLASS
        if rows.size < need:
            raise ConfigError(f"class {int(c)} has {rows.size} samples, episode needs {need}")
        pick = rng.choice(rows, size=need, replace=False)
        support.append(pick[:shots])
        query.append(pick[shots:])
    return EpisodeSpec(ways, shots, int(trial_seed), np.concatenate(support), np.concatenate(query))


class FewshotResult(NamedTuple):
    mean: float
    std: float
    accuracies: tuple[float, ...]


def fewshot_eval(
    features,
    labels,
    ways: int,
    shots: int,
    trials: int = 10,
    seed: int = 0,
    probe_epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
) -> FewshotResult:
    """Mean and sample std of probe accuracy over independent episodes.

    With a single trial the std is 0 by convention.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    accs = []
    for t in range(trials):
        ep = fewshot_episode(y, ways, shots, trial_seed=seed * 100003 + t)
        chosen = np.unique(y[ep.support])
        remap = {int(c): i for i, c in enumerate(chosen)}
        y_sup = np.array([remap[int(c)] for c in y[ep.support]])
        w, b = train_probe(x[ep.support], y_sup, chosen.size, probe_epochs, lr)
        y_qry = np.array([remap[int(c)] for c in y[ep.query]])
        accs.append(probe_accuracy(x[ep.query], y_qry, w, b))
    std = float(np.std(accs, ddof=1)) if trials > 1 else 0.0
    return FewshotResult(float(np.mean(accs)), std, tuple(accs))


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def retrieve(query, gallery_vp, gallery_sp, mode: str, k: int = 5) -> np.ndarray:
    """Top-k gallery ids by dot product; text queries rank the text-aligned
    features, image queries the image-aligned ones. Ties break by lowest id."""
    if mode not in ("text", "image"):
        raise ConfigError(f"retrieval mode must be 'text' or 'image', got {mode!r}")
    gallery = np.asarray(gallery_sp if mode == "text" else gallery_vp, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or gallery.ndim != 2 or gallery.shape[1] != q.size:
        raise ShapeError(f"query {q.shape} does not match gallery {gallery.shape}")
    if gallery.shape[0] == 0:
        raise ConfigError("retrieval gallery is empty")
    if k > gallery.shape[0]:
        warnings.warn(f"k={k} exceeds gallery size {gallery.shape[0]}; clamping")
        k = gallery.shape[0]
    scores = gallery @ q
    order = np.argsort(-scores, kind="stable")
    return order[:k]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def report_row(metric: str, mode: str, split: str, value: float) -> dict:
    return {"metric": metric, "mode": mode, "split": split, "value": float(value)}


def format_report(rows: list[dict]) -> str:
    """Aligned-column text table over (metric, mode, split, value)."""
    headers = ("metric", "mode", "split", "value")
    cells = [[str(r["metric"]), str(r["mode"]), str(r["split"]), f"{r['value']:.6f}"] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for c in cells:
        lines.append("  ".join(c[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)


def write_report_csv(rows: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mode", "split", "value"])
        for r in rows:
            writer.writerow([r["metric"], r["mode"], r["split"], repr(float(r["value"]))])
