"""Synthetic tri-modal triplet datasets with a controllable image-feature
domain shift, plus the binary triplet file format.

Each sample owns a latent vector drawn around its class anchor. The latent
splits into class-signature dims (visual-only / shared / semantic-only, the
split ratio sets the shared fraction) and instance dims present in both
factor views. Point-cloud geometry and image features are driven by the
visual view of the latent, text features by the semantic view, so the two
alignment targets overlap but do not coincide. Image features optionally
pass through the fixed invertible domain shift; its strength is tuned by
bisection until the held-out image-text matching accuracy lands in a target
band.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import numkit as nk
from .encoders import FrozenEncoderSpec, frozen_image_embed, frozen_text_embed, shift_apply
from .errors import ConfigError, FormatError
from .losses import contrastive_accuracy

MAGIC = b"TAMM"
VERSION = 1
_HEADER_FMT = "<7IQdId"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

PRETRAIN = "pretrain"
EVAL_SEEN = "eval-seen"
EVAL_HELDOUT = "eval-heldout"
SEEN_FRACTION = 0.8  # leading fraction of each seen class tagged pretrain

ACCURACY_BATCH = 64
TUNE_BAND = (0.35, 0.55)
_TUNE_INNER_BAND = (0.39, 0.51)  # aim inside the band so f32 rounding cannot escape it

# generator geometry constants
ANCHOR_SCALE = 1.0
CLASS_JITTER = 0.1
INSTANCE_JITTER = 1.0
INSTANCE_FRACTION = 0.375  # share of latent dims carrying per-sample identity
VIEW_SCALE = 0.25
GEOM_ANCHORS = 8
GEOM_BASE_SCALE = 2.0  # separation of the fixed blob template (cube vertices)
POINT_JITTER = 0.08


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 30
    samples_per_class: int = 100
    views: int = 4
    latent_dim: int = 16
    feature_dim: int = 64
    points_per_cloud: int = 256
    heldout_classes: int = 10
    split_ratio: float = 0.7
    shift_enabled: bool = True
    shift_strength: float | None = None  # None: tune by bisection
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if not 1 <= self.heldout_classes < self.classes:
            raise ConfigError(f"heldout classes must be in [1, {self.classes - 1}], got {self.heldout_classes}")
        if self.samples_per_class < 1 or self.views < 1:
            raise ConfigError("samples per class and views must be >= 1")
        if self.latent_dim < 4 or self.feature_dim < 1:
            raise ConfigError(f"need latent_dim >= 4 and feature_dim >= 1, got {self.latent_dim}, {self.feature_dim}")
        if self.points_per_cloud < 8:
            raise ConfigError(f"points per cloud must be >= 8, got {self.points_per_cloud}")
        if not 0.0 <= self.split_ratio <= 1.0:
            raise ConfigError(f"split ratio must be in [0, 1], got {self.split_ratio}")
        if self.shift_strength is not None and not 0.0 <= self.shift_strength <= 1.0:
            raise ConfigError(f"shift strength must be in [0, 1] or None, got {self.shift_strength}")

    @property
    def n_samples(self) -> int:
        return self.classes * self.samples_per_class

    @property
    def seen_classes(self) -> int:
        return self.classes - self.heldout_classes


def factor_masks(latent_dim: int, split_ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (visual, semantic) views over the latent dims.

    Layout: [visual-only | shared | semantic-only | instance]; instance dims
    belong to both views, the split ratio sets the shared share of the class
    dims.
    """
    n_inst = max(1, int(round(latent_dim * INSTANCE_FRACTION)))
    n_cls = latent_dim - n_inst
    n_shared = int(round(split_ratio * n_cls))
    n_vis_only = (n_cls - n_shared + 1) // 2
    vis = np.zeros(latent_dim, dtype=bool)
    sem = np.zeros(latent_dim, dtype=bool)
    vis[0 : n_vis_only + n_shared] = True
    sem[n_vis_only:n_cls] = True
    vis[n_cls:] = True
    sem[n_cls:] = True
    return vis, sem


@dataclass
class TripletSet:
    spec: DatasetSpec
    encoder: FrozenEncoderSpec
    points: np.ndarray  # (n, N, 3)
    image_feats: np.ndarray  # (n, views, d)
    text_feats: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)

    def indices(self, tag: str) -> np.ndarray:
        """Sample indices of one split; splits are derived, never stored."""
        if tag not in (PRETRAIN, EVAL_SEEN, EVAL_HELDOUT):
            raise ConfigError(f"unknown split tag {tag!r}")
        picked = []
        n_train = int(SEEN_FRACTION * self.spec.samples_per_class)
        for c in range(self.spec.classes):
            rows = np.flatnonzero(self.labels == c)
            if c >= self.spec.seen_classes:
                if tag == EVAL_HELDOUT:
                    picked.append(rows)
            elif tag == PRETRAIN:
                picked.append(rows[:n_train])
            elif tag == EVAL_SEEN:
                picked.append(rows[n_train:])
        if not picked:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(picked)


def batched_contrastive_accuracy(image_feats, text_feats, batch: int = ACCURACY_BATCH) -> float:
    """Mean image-to-text matching accuracy over fixed consecutive batches.

    ``image_feats`` is (n, d) or (n, m, d); every view contributes its own
    batches. Trailing partial batches are dropped (all, if n < batch).
    """
    imgs = np.asarray(image_feats, dtype=np.float64)
    txts = np.asarray(text_feats, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[:, None, :]
    n = imgs.shape[0]
    size = min(batch, n)
    accs = []
    for k in range(imgs.shape[1]):
        for start in range(0, n - size + 1, size):
            rows = slice(start, start + size)
            accs.append(contrastive_accuracy(imgs[rows, k], txts[rows]))
    return float(np.mean(accs))


def _tune_shift(enc: FrozenEncoderSpec, unshifted: np.ndarray, texts: np.ndarray) -> float:
    """Bisection on the shift strength until held-out accuracy hits the band."""

    def acc_at(s: float) -> float:
        shifted = np.empty_like(unshifted)
        for k in range(unshifted.shape[1]):
            shifted[:, k] = nk.l2_normalize(shift_apply(unshifted[:, k], enc, s)).value
        return batched_contrastive_accuracy(shifted, texts)

    lo_acc = acc_at(1.0)
    if lo_acc > _TUNE_INNER_BAND[1]:
        raise ConfigError(f"domain shift too weak to reach the target band: accuracy {lo_acc:.3f} at s=1")
    lo, hi = 0.0, 1.0
    mid = 0.5
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        acc = acc_at(mid)
        if _TUNE_INNER_BAND[0] <= acc <= _TUNE_INNER_BAND[1]:
            return mid
        if acc > sum(_TUNE_INNER_BAND) / 2:
            lo = mid
        else:
            hi = mid
    raise ConfigError("shift tuning did not converge to the target accuracy band")


def _quantize32(a: np.ndarray) -> np.ndarray:
    # datasets live on the f32 grid so the on-disk round trip is bit-exact
    return a.astype(np.float32).astype(np.float64)


def generate(spec: DatasetSpec) -> TripletSet:
    """Deterministically generate a triplet set from its spec."""
    z, d, m = spec.latent_dim, spec.feature_dim, spec.views
    vis, sem = factor_masks(z, spec.split_ratio)
    n_cls_dims = z - max(1, int(round(z * INSTANCE_FRACTION)))
    enc = FrozenEncoderSpec.build(
        seed=spec.seed,
        latent_dim=z,
        feature_dim=d,
        max_views=m,
        view_scale=VIEW_SCALE,
        shift_enabled=spec.shift_enabled,
        shift_strength=0.0,
    )

    anchors = None
    rng = None
    for salt in range(32):
        rng = np.random.default_rng([spec.seed, salt, 0xDA7A])
        candidate = np.zeros((spec.classes, z))
        candidate[:, :n_cls_dims] = ANCHOR_SCALE * rng.normal(size=(spec.classes, n_cls_dims))
        bank = frozen_text_embed(candidate * sem, enc)
        gram = bank @ bank.T
        np.fill_diagonal(gram, 0.0)
        if gram.max() < 0.99:
            anchors = candidate
            break
    if anchors is None:
        raise ConfigError("could not draw class anchors with separated text embeddings")

    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    n = labels.size
    latents = anchors[labels].copy()
    latents[:, :n_cls_dims] += CLASS_JITTER * rng.normal(size=(n, n_cls_dims))
    # constant-norm instance vectors: every sample carries the same amount of
    # matchable identity, so normalization cannot reorder matched pairs
    n_inst = z - n_cls_dims
    inst = rng.normal(size=(n, n_inst))
    inst *= (INSTANCE_JITTER * np.sqrt(n_inst)) / np.linalg.norm(inst, axis=1, keepdims=True)
    latents[:, n_cls_dims:] += inst

    # clouds are a fixed, well-separated blob template (cube vertices) whose
    # per-blob displacements are linear in the visual latent; identifiable
    # blobs make the latent readable through permutation-invariant pooling
    geo = rng.normal(0.0, 1.0 / np.sqrt(z), size=(z, GEOM_ANCHORS * 3))
    corners = np.array([[x, y, w] for x in (-1, 1) for y in (-1, 1) for w in (-1, 1)], dtype=np.float64)
    bases = GEOM_BASE_SCALE * corners[np.arange(GEOM_ANCHORS) % 8]
    centers = bases + ((latents * vis) @ geo).reshape(n, GEOM_ANCHORS, 3)
    assign = np.arange(spec.points_per_cloud) % GEOM_ANCHORS
    points = centers[:, assign, :] + POINT_JITTER * rng.normal(size=(n, spec.points_per_cloud, 3))

    text_feats = frozen_text_embed(latents * sem, enc)
    unshifted = np.stack([frozen_image_embed(latents * vis, k, enc, shifted=False) for k in range(m)], axis=1)

    if spec.shift_enabled:
        if spec.shift_strength is None:
            held = np.flatnonzero(labels >= spec.seen_classes)
            strength = _tune_shift(enc, unshifted[held], text_feats[held])
        else:
            strength = spec.shift_strength
    else:
        strength = 0.0
    enc = enc.with_strength(strength)
    if strength > 0.0:
        image_feats = np.stack([frozen_image_embed(latents * vis, k, enc, shifted=True) for k in range(m)], axis=1)
    else:
        image_feats = unshifted

    return TripletSet(
        spec=replace(spec, shift_strength=strength),
        encoder=enc,
        points=_quantize32(points),
        image_feats=_quantize32(image_feats),
        text_feats=_quantize32(text_feats),
        labels=labels.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Binary triplet files
# ---------------------------------------------------------------------------


def write_triplets(tset: TripletSet, path) -> None:
    """magic, version, header, then f32 points / image / text and u32 labels."""
    spec = tset.spec
    if spec.shift_strength is None:
        raise ConfigError("cannot store an untuned shift strength")
    header = struct.pack(
        _HEADER_FMT,
        spec.classes,
        spec.samples_per_class,
        spec.views,
        spec.latent_dim,
        spec.feature_dim,
        spec.points_per_cloud,
        spec.heldout_classes,
        spec.seed,
        spec.split_ratio,
        int(spec.shift_enabled),
        spec.shift_strength,
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(header)
        fh.write(np.ascontiguousarray(tset.points, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(tset.image_feats, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(tset.text_feats, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(tset.labels, dtype="<u4").tobytes())


def _take(blob: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(blob):
        raise FormatError(f"truncated file: {what} needs {size} bytes at byte {offset}, only {len(blob) - offset} left")
    return blob[offset : offset + size], offset + size


def read_triplets(path) -> TripletSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, off = _take(blob, 0, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    raw_version, off = _take(blob, off, 4, "version")
    version = struct.unpack("<I", raw_version)[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    raw_header, off = _take(blob, off, _HEADER_SIZE, "header")
    (classes, spc, views, z, d, n_pts, heldout, seed, ratio, shift_flag, strength) = struct.unpack(
        _HEADER_FMT, raw_header
    )
    spec = DatasetSpec(
        classes=classes,
        samples_per_class=spc,
        views=views,
        latent_dim=z,
        feature_dim=d,
        points_per_cloud=n_pts,
        heldout_classes=heldout,
        split_ratio=ratio,
        shift_enabled=bool(shift_flag),
        shift_strength=strength,
        seed=seed,
    )
    n = spec.n_samples
    raw, off = _take(blob, off, n * n_pts * 3 * 4, "points")
    points = np.frombuffer(raw, dtype="<f4").reshape(n, n_pts, 3).astype(np.float64)
    raw, off = _take(blob, off, n * views * d * 4, "image features")
    image_feats = np.frombuffer(raw, dtype="<f4").reshape(n, views, d).astype(np.float64)
    raw, off = _take(blob, off, n * d * 4, "text features")
    text_feats = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    raw, off = _take(blob, off, n * 4, "labels")
    labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if off != len(blob):
        raise FormatError(f"trailing garbage: {len(blob) - off} unexpected bytes at byte {off}")
    enc = FrozenEncoderSpec.build(
        seed=spec.seed,
        latent_dim=z,
        feature_dim=d,
        max_views=views,
        view_scale=VIEW_SCALE,
        shift_enabled=spec.shift_enabled,
        shift_strength=strength,
    )
    return TripletSet(spec, enc, points, image_feats, text_feats, labels)
