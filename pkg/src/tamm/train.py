"""Optimizer, learning-rate schedule, the two pre-training stages, the
one-stage ablation, and binary checkpointing.

Training is single-threaded and fully determined by (seed, config, dataset):
per-epoch shuffles derive from (seed, epoch), the optimizer is functional,
and checkpoints restore parameters, moments, and step counter exactly, so a
resumed run reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from .adapters import AdapterParams, CiaConfig, cia_forward, dual_forward
from .datagen import PRETRAIN, EVAL_HELDOUT, TripletSet, batched_contrastive_accuracy
from .encoders import PointEncoderParams, encode_points
from .errors import ConfigError, FormatError, IncompatibilityError, ShapeError
from .losses import LossConfig, realign_loss, trimodal_loss

ADAM_EPS = 1e-8

CKPT_MAGIC = b"TAMK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    warmup_epochs: int = 2
    total_epochs: int = 50
    batch_size: int = 128
    tau: float = 0.07
    alpha: float = 0.2
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    stage: str = "two"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}/{self.total_epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.stage not in ("one", "two"):
            raise ConfigError(f"stage must be 'one' or 'two', got {self.stage!r}")


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """Decoupled-weight-decay update with bias correction; purely functional."""
    if params.keys() != grads.keys():
        raise ShapeError(f"parameter/gradient key mismatch: {sorted(params)} vs {sorted(grads)}")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (1.0 - lr * weight_decay) * p - lr * update
        new_m[name] = m
        new_v[name] = v
    return new_p, OptimState(new_m, new_v, t)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then a half cosine down to zero."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}/{total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Stage orchestration
# ---------------------------------------------------------------------------


class Checkpoint(NamedTuple):
    blocks: dict[str, np.ndarray]
    optim: OptimState
    config: TrainConfig
    step: int
    meta: dict[str, str]


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _resume_state(resume: Checkpoint | None, params: dict, cfg: TrainConfig, stage: str):
    if resume is None:
        return params, OptimState.zeros(params), 0
    if resume.config != cfg:
        raise IncompatibilityError("resume checkpoint was written with a different train config")
    if resume.meta.get("trained_stage") != stage:
        raise IncompatibilityError(f"resume checkpoint is for stage {resume.meta.get('trained_stage')!r}, not {stage!r}")
    for name, p in params.items():
        got = resume.blocks.get(name)
        if got is None or got.shape != p.shape:
            raise ShapeError(f"checkpoint block {name!r} has shape {None if got is None else got.shape}, expected {p.shape}")
    restored = {name: resume.blocks[name].copy() for name in params}
    return restored, resume.optim, resume.step


def _stage1_pairs(data: TripletSet) -> tuple[np.ndarray, np.ndarray]:
    idx = data.indices(PRETRAIN)
    m = data.spec.views
    imgs = data.image_feats[idx].reshape(-1, data.spec.feature_dim)
    txts = np.repeat(data.text_feats[idx], m, axis=0)
    return imgs, txts


def _split_accuracy(data: TripletSet, tag: str, cia: AdapterParams | None, cfg: CiaConfig) -> float:
    idx = data.indices(tag)
    imgs = data.image_feats[idx]
    if cia is not None:
        flat = cia_forward(imgs.reshape(-1, imgs.shape[-1]), cia, cfg).value
        imgs = flat.reshape(imgs.shape)
    return batched_contrastive_accuracy(imgs, data.text_feats[idx])


def train_stage1(
    data: TripletSet,
    cia: AdapterParams,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    stop_after_epochs: int | None = None,
) -> tuple[AdapterParams, list[dict], OptimState]:
    """Fit the image re-alignment adapter on shifted image/text pairs.

    Every view of a sample counts as an independent pair. Returns the trained
    adapter, one metrics row per epoch (plus an epoch-0 row for the untrained
    state), and the final optimizer state. ``stop_after_epochs`` interrupts
    the run early without altering the schedule, for checkpoint-and-resume.
    """
    imgs, txts = _stage1_pairs(data)
    n_pairs = imgs.shape[0]
    if cfg.batch_size > n_pairs:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds {n_pairs} training pairs")
    spe = n_pairs // cfg.batch_size
    total_steps = spe * cfg.total_epochs
    warmup_steps = spe * cfg.warmup_epochs
    loss_cfg = LossConfig(cfg.tau)
    cia_cfg = CiaConfig(cfg.alpha)

    params = {"cia.w1": cia.w1.copy(), "cia.w2": cia.w2.copy()}
    params, optim, start_step = _resume_state(resume, params, cfg, "stage1")

    rows: list[dict] = []
    if start_step == 0:
        cur = AdapterParams(params["cia.w1"], params["cia.w2"], "relu")
        init_losses = []
        for b in range(spe):
            sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
            adapted = cia_forward(imgs[sl], cur, cia_cfg)
            init_losses.append(realign_loss(adapted.value, txts[sl], loss_cfg).value)
        rows.append(
            {
                "stage": "stage1",
                "epoch": 0,
                "loss": float(np.mean(init_losses)),
                "acc_pretrain": _split_accuracy(data, PRETRAIN, cur, cia_cfg),
                "acc_heldout": _split_accuracy(data, EVAL_HELDOUT, cur, cia_cfg),
                "lr": 0.0,
            }
        )

    lr = 0.0
    last_epoch = cfg.total_epochs if stop_after_epochs is None else min(stop_after_epochs, cfg.total_epochs)
    for epoch in range(start_step // spe, last_epoch):
        perm = _epoch_perm(cfg.seed, epoch, n_pairs)
        epoch_losses = []
        for b in range(spe):
            gstep = epoch * spe + b
            if gstep < start_step:
                continue
            take = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            cur = AdapterParams(params["cia.w1"], params["cia.w2"], "relu")
            adapted = cia_forward(imgs[take], cur, cia_cfg)
            loss = realign_loss(adapted.value, txts[take], loss_cfg)
            (d_adapted,) = loss.backward(1.0)
            _, gw1, gw2 = adapted.backward(d_adapted)
            lr = cosine_lr(gstep, total_steps, warmup_steps, cfg.base_lr)
            params, optim = adamw_step(
                params, {"cia.w1": gw1, "cia.w2": gw2}, optim, lr, cfg.betas, cfg.weight_decay
            )
            epoch_losses.append(loss.value)
        cur = AdapterParams(params["cia.w1"], params["cia.w2"], "relu")
        rows.append(
            {
                "stage": "stage1",
                "epoch": epoch + 1,
                "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                "acc_pretrain": _split_accuracy(data, PRETRAIN, cur, cia_cfg),
                "acc_heldout": _split_accuracy(data, EVAL_HELDOUT, cur, cia_cfg),
                "lr": lr,
            }
        )
    trained = AdapterParams(params["cia.w1"], params["cia.w2"], "relu")
    return trained, rows, optim


def adapt_views(image_feats: np.ndarray, cia: AdapterParams | None, cfg: CiaConfig) -> np.ndarray:
    """Push (n, m, d) image features through a frozen cia; identity when None."""
    if cia is None:
        return image_feats
    flat = cia_forward(image_feats.reshape(-1, image_feats.shape[-1]), cia, cfg).value
    return flat.reshape(image_feats.shape)


def _views_count(data: TripletSet, views_limit: int | None) -> int:
    m = data.spec.views if views_limit is None else views_limit
    if not 1 <= m <= data.spec.views:
        raise IncompatibilityError(f"requested {views_limit} views, dataset stores {data.spec.views}")
    return m


def train_stage2(
    data: TripletSet,
    cia: AdapterParams | None,
    encoder: PointEncoderParams,
    iaa: AdapterParams,
    taa: AdapterParams,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    views_limit: int | None = None,
    stop_after_epochs: int | None = None,
) -> tuple[PointEncoderParams, AdapterParams, AdapterParams, list[dict], OptimState]:
    """Fit the point encoder and the dual adapters against frozen targets.

    Image features pass once through the frozen cia (``None`` trains directly
    against the raw, shifted features). Both loss components are logged.
    """
    m = _views_count(data, views_limit)
    idx = data.indices(PRETRAIN)
    n = idx.size
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds {n} training samples")
    adapted = adapt_views(data.image_feats[idx][:, :m], cia, CiaConfig(cfg.alpha))
    texts = data.text_feats[idx]
    clouds = data.points[idx]
    spe = n // cfg.batch_size
    total_steps = spe * cfg.total_epochs
    warmup_steps = spe * cfg.warmup_epochs
    loss_cfg = LossConfig(cfg.tau)

    params = {
        "pe.w1": encoder.w1.copy(),
        "pe.w2": encoder.w2.copy(),
        "pe.head": encoder.head.copy(),
        "iaa.w1": iaa.w1.copy(),
        "iaa.w2": iaa.w2.copy(),
        "taa.w1": taa.w1.copy(),
        "taa.w2": taa.w2.copy(),
    }
    params, optim, start_step = _resume_state(resume, params, cfg, "stage2")

    def batch_terms(take, want_grads):
        pe = PointEncoderParams(params["pe.w1"], params["pe.w2"], params["pe.head"])
        cur_iaa = AdapterParams(params["iaa.w1"], params["iaa.w2"], "gelu")
        cur_taa = AdapterParams(params["taa.w1"], params["taa.w2"], "gelu")
        enc_out = encode_points(clouds[take], pe)
        vp = dual_forward(enc_out.value, cur_iaa)
        sp = dual_forward(enc_out.value, cur_taa)
        views = [adapted[take, k] for k in range(m)]
        tl = trimodal_loss(sp.value, texts[take], vp.value, views, loss_cfg)
        if not want_grads:
            return tl, None
        d_sp, d_vp = tl.backward(1.0)
        g_fp_t, g_t1, g_t2 = sp.backward(d_sp)
        g_fp_v, g_v1, g_v2 = vp.backward(d_vp)
        g_w1, g_w2, g_head = enc_out.backward(g_fp_t + g_fp_v)
        grads = {
            "pe.w1": g_w1,
            "pe.w2": g_w2,
            "pe.head": g_head,
            "iaa.w1": g_v1,
            "iaa.w2": g_v2,
            "taa.w1": g_t1,
            "taa.w2": g_t2,
        }
        return tl, grads

    rows: list[dict] = []
    if start_step == 0:
        init = [batch_terms(np.arange(b * cfg.batch_size, (b + 1) * cfg.batch_size), False)[0] for b in range(spe)]
        rows.append(
            {
                "stage": "stage2",
                "epoch": 0,
                "loss": float(np.mean([t.value for t in init])),
                "loss_text": float(np.mean([t.text_term for t in init])),
                "loss_image": float(np.mean([t.image_term for t in init])),
                "lr": 0.0,
            }
        )

    lr = 0.0
    last_epoch = cfg.total_epochs if stop_after_epochs is None else min(stop_after_epochs, cfg.total_epochs)
    for epoch in range(start_step // spe, last_epoch):
        perm = _epoch_perm(cfg.seed, epoch, n)
        totals, text_terms, image_terms = [], [], []
        for b in range(spe):
            gstep = epoch * spe + b
            if gstep < start_step:
                continue
            take = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            tl, grads = batch_terms(take, True)
            lr = cosine_lr(gstep, total_steps, warmup_steps, cfg.base_lr)
            params, optim = adamw_step(params, grads, optim, lr, cfg.betas, cfg.weight_decay)
            totals.append(tl.value)
            text_terms.append(tl.text_term)
            image_terms.append(tl.image_term)
        rows.append(
            {
                "stage": "stage2",
                "epoch": epoch + 1,
                "loss": float(np.mean(totals)) if totals else float("nan"),
                "loss_text": float(np.mean(text_terms)) if text_terms else float("nan"),
                "loss_image": float(np.mean(image_terms)) if image_terms else float("nan"),
                "lr": lr,
            }
        )
    out_pe = PointEncoderParams(params["pe.w1"], params["pe.w2"], params["pe.head"])
    out_iaa = AdapterParams(params["iaa.w1"], params["iaa.w2"], "gelu")
    out_taa = AdapterParams(params["taa.w1"], params["taa.w2"], "gelu")
    return out_pe, out_iaa, out_taa, rows, optim


def train_onestage(
    data: TripletSet,
    cia: AdapterParams,
    encoder: PointEncoderParams,
    iaa: AdapterParams,
    taa: AdapterParams,
    cfg: TrainConfig,
    views_limit: int | None = None,
) -> tuple[AdapterParams, PointEncoderParams, AdapterParams, AdapterParams, list[dict], OptimState]:
    """Joint ablation: one loop over realign + trimodal with the cia trainable.

    The trimodal term still treats the adapted image features as frozen
    targets, so the cia only learns through the realign term.
    """
    m = _views_count(data, views_limit)
    idx = data.indices(PRETRAIN)
    n = idx.size
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds {n} training samples")
    images = data.image_feats[idx][:, :m]
    texts = data.text_feats[idx]
    clouds = data.points[idx]
    spe = n // cfg.batch_size
    total_steps = spe * cfg.total_epochs
    warmup_steps = spe * cfg.warmup_epochs
    loss_cfg = LossConfig(cfg.tau)
    cia_cfg = CiaConfig(cfg.alpha)

    params = {
        "cia.w1": cia.w1.copy(),
        "cia.w2": cia.w2.copy(),
        "pe.w1": encoder.w1.copy(),
        "pe.w2": encoder.w2.copy(),
        "pe.head": encoder.head.copy(),
        "iaa.w1": iaa.w1.copy(),
        "iaa.w2": iaa.w2.copy(),
        "taa.w1": taa.w1.copy(),
        "taa.w2": taa.w2.copy(),
    }
    optim = OptimState.zeros(params)

    rows: list[dict] = []
    lr = 0.0
    for epoch in range(cfg.total_epochs):
        perm = _epoch_perm(cfg.seed, epoch, n)
        realigns, trimodals, text_terms, image_terms = [], [], [], []
        for b in range(spe):
            gstep = epoch * spe + b
            take = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            cur_cia = AdapterParams(params["cia.w1"], params["cia.w2"], "relu")
            pe = PointEncoderParams(params["pe.w1"], params["pe.w2"], params["pe.head"])
            cur_iaa = AdapterParams(params["iaa.w1"], params["iaa.w2"], "gelu")
            cur_taa = AdapterParams(params["taa.w1"], params["taa.w2"], "gelu")

            adapted_views = [cia_forward(images[take, k], cur_cia, cia_cfg) for k in range(m)]
            realign_pairs = [realign_loss(av.value, texts[take], loss_cfg) for av in adapted_views]
            realign_term = float(np.sum([rp.value for rp in realign_pairs])) / m

            enc_out = encode_points(clouds[take], pe)
            vp = dual_forward(enc_out.value, cur_iaa)
            sp = dual_forward(enc_out.value, cur_taa)
            tl = trimodal_loss(sp.value, texts[take], vp.value, [av.value for av in adapted_views], loss_cfg)

            g_c1 = np.zeros_like(params["cia.w1"])
            g_c2 = np.zeros_like(params["cia.w2"])
            for av, rp in zip(adapted_views, realign_pairs):
                (d_ad,) = rp.backward(1.0 / m)
                _, gw1, gw2 = av.backward(d_ad)
                g_c1 += gw1
                g_c2 += gw2
            d_sp, d_vp = tl.backward(1.0)
            g_fp_t, g_t1, g_t2 = sp.backward(d_sp)
            g_fp_v, g_v1, g_v2 = vp.backward(d_vp)
            g_w1, g_w2, g_head = enc_out.backward(g_fp_t + g_fp_v)
            grads = {
                "cia.w1": g_c1,
                "cia.w2": g_c2,
                "pe.w1": g_w1,
                "pe.w2": g_w2,
                "pe.head": g_head,
                "iaa.w1": g_v1,
                "iaa.w2": g_v2,
                "taa.w1": g_t1,
                "taa.w2": g_t2,
            }
            lr = cosine_lr(gstep, total_steps, warmup_steps, cfg.base_lr)
            params, optim = adamw_step(params, grads, optim, lr, cfg.betas, cfg.weight_decay)
            realigns.append(realign_term)
            trimodals.append(tl.value)
            text_terms.append(tl.text_term)
            image_terms.append(tl.image_term)
        rows.append(
            {
                "stage": "joint",
                "epoch": epoch + 1,
                "loss": float(np.mean(realigns) + np.mean(trimodals)),
                "loss_realign": float(np.mean(realigns)),
                "loss_trimodal": float(np.mean(trimodals)),
                "loss_text": float(np.mean(text_terms)),
                "loss_image": float(np.mean(image_terms)),
                "lr": lr,
            }
        )
    out_cia = AdapterParams(params["cia.w1"], params["cia.w2"], "relu")
    out_pe = PointEncoderParams(params["pe.w1"], params["pe.w2"], params["pe.head"])
    out_iaa = AdapterParams(params["iaa.w1"], params["iaa.w2"], "gelu")
    out_taa = AdapterParams(params["taa.w1"], params["taa.w2"], "gelu")
    return out_cia, out_pe, out_iaa, out_taa, rows, optim


# ---------------------------------------------------------------------------
# Checkpoints and metrics
# ---------------------------------------------------------------------------


def config_to_meta(cfg: TrainConfig) -> dict[str, str]:
    meta = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "betas":
            meta["betas"] = f"{v[0]!r},{v[1]!r}"
        else:
            meta[f.name] = repr(v) if isinstance(v, float) else str(v)
    return meta


def config_from_meta(meta: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        raw = meta.get(f.name)
        if raw is None:
            raise FormatError(f"checkpoint meta is missing config key {f.name!r}")
        if f.name == "betas":
            a, b = raw.split(",")
            kwargs["betas"] = (float(a), float(b))
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return TrainConfig(**kwargs)


def save_checkpoint(
    path,
    blocks: dict[str, np.ndarray],
    optim: OptimState,
    cfg: TrainConfig,
    step: int,
    extra: dict[str, str] | None = None,
) -> None:
    """magic, version, meta (key=value lines), then named f64 blocks."""
    meta = dict(config_to_meta(cfg))
    meta["step"] = str(step)
    for k, v in (extra or {}).items():
        if k in meta:
            raise ConfigError(f"extra meta key {k!r} collides with a config key")
        meta[k] = str(v)
    all_blocks = dict(blocks)
    for name, arr in optim.m.items():
        all_blocks[f"optim.m:{name}"] = arr
    for name, arr in optim.v.items():
        all_blocks[f"optim.v:{name}"] = arr
    meta_bytes = "\n".join(f"{k}={meta[k]}" for k in sorted(meta)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(all_blocks)))
        for name in sorted(all_blocks):
            arr = np.ascontiguousarray(all_blocks[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset, size, what):
        if offset + size > len(blob):
            raise FormatError(f"truncated checkpoint: {what} needs {size} bytes at byte {offset}")
        return blob[offset : offset + size], offset + size

    magic, off = take(0, 4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte 0")
    raw, off = take(off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    raw, off = take(off, 4, "meta length")
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = take(off, meta_len, "meta")
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    raw, off = take(off, 4, "block count")
    (n_blocks,) = struct.unpack("<I", raw)
    named: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        raw, off = take(off, 4, "block name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, off = take(off, name_len, "block name")
        name = raw.decode("utf-8")
        raw, off = take(off, 4, "block rank")
        (ndim,) = struct.unpack("<I", raw)
        raw, off = take(off, 4 * ndim, "block dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(dims)) if dims else 1
        raw, off = take(off, 8 * count, f"block {name!r} data")
        named[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if off != len(blob):
        raise FormatError(f"trailing garbage: {len(blob) - off} unexpected bytes at byte {off}")
    blocks = {k: v for k, v in named.items() if not k.startswith("optim.")}
    m = {k.split(":", 1)[1]: v for k, v in named.items() if k.startswith("optim.m:")}
    v = {k.split(":", 1)[1]: v for k, v in named.items() if k.startswith("optim.v:")}
    step = int(meta.get("step", "0"))
    cfg = config_from_meta(meta)
    return Checkpoint(blocks, OptimState(m, v, step), cfg, step, meta)


def model_blocks(
    cia: AdapterParams | None,
    encoder: PointEncoderParams | None = None,
    iaa: AdapterParams | None = None,
    taa: AdapterParams | None = None,
) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    if cia is not None:
        blocks["cia.w1"], blocks["cia.w2"] = cia.w1, cia.w2
    if encoder is not None:
        blocks["pe.w1"], blocks["pe.w2"], blocks["pe.head"] = encoder.w1, encoder.w2, encoder.head
    if iaa is not None:
        blocks["iaa.w1"], blocks["iaa.w2"] = iaa.w1, iaa.w2
    if taa is not None:
        blocks["taa.w1"], blocks["taa.w2"] = taa.w1, taa.w2
    return blocks


def blocks_to_model(
    blocks: dict[str, np.ndarray],
) -> tuple[AdapterParams | None, PointEncoderParams | None, AdapterParams | None, AdapterParams | None]:
    cia = AdapterParams(blocks["cia.w1"], blocks["cia.w2"], "relu") if "cia.w1" in blocks else None
    pe = PointEncoderParams(blocks["pe.w1"], blocks["pe.w2"], blocks["pe.head"]) if "pe.w1" in blocks else None
    iaa = AdapterParams(blocks["iaa.w1"], blocks["iaa.w2"], "gelu") if "iaa.w1" in blocks else None
    taa = AdapterParams(blocks["taa.w1"], blocks["taa.w2"], "gelu") if "taa.w1" in blocks else None
    return cia, pe, iaa, taa


def write_metrics_csv(rows: list[dict], path, run_id: str) -> None:
    """Long-format metrics table: run_id, stage, epoch, metric, value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "stage", "epoch", "metric", "value"])
        for row in rows:
            for key, value in row.items():
                if key in ("stage", "epoch"):
                    continue
                writer.writerow([run_id, row["stage"], row["epoch"], key, repr(float(value))])
