"""Command-line entry point tying generation, training, evaluation, and
gradient checks into reproducible runs.

Configuration is a plain key=value file (# comments) whose keys are the
dataset-spec and train-config field names; --set flags override file values,
the TAMM_SEED environment variable sits between the two for the seed. All
outputs are deterministic functions of the effective config, so rerunning a
command reproduces its artifacts byte for byte.

Exit codes: 0 success, 1 check failure, 2 config error, 3 missing artifact,
4 incompatibility (includes malformed binary artifacts).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import datagen, evaluate, train
from . import numkit as nk
from .adapters import CiaConfig, init_adapter
from .datagen import DatasetSpec, read_triplets, write_triplets
from .encoders import init_point_encoder
from .errors import (
    ConfigError,
    DegenerateVectorError,
    FormatError,
    IncompatibilityError,
    NumericError,
    ShapeError,
)
from .gradcheck import TOLERANCE, all_pass, run_gradcheck
from .train import TrainConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4

POINT_ENCODER_HIDDEN = 128

_DATASET_FIELDS = {f.name: f for f in fields(DatasetSpec)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "betas":
        parts = raw.split(",")
        if len(parts) != 2:
            raise ConfigError(f"betas needs two comma-separated floats, got {raw!r}")
        return (float(parts[0]), float(parts[1]))
    if key == "shift_strength" and raw.lower() in ("auto", "none"):
        return None
    field = _DATASET_FIELDS.get(key) or _TRAIN_FIELDS.get(key)
    kind = field.type
    if kind in ("bool", bool) or key == "shift_enabled":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {key}={raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float) or key == "shift_strength":
        return float(raw)
    return raw


def _parse_config_file(path) -> dict[str, str]:
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def build_configs(args) -> tuple[DatasetSpec, TrainConfig]:
    """Merge defaults <- config file <- TAMM_SEED <- --set/--seed flags."""
    merged: dict[str, str] = {}
    if getattr(args, "config", None):
        merged.update(_parse_config_file(args.config))
    env_seed = os.environ.get("TAMM_SEED")
    if env_seed is not None:
        merged["seed"] = env_seed
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        merged[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        merged["seed"] = str(args.seed)

    ds_kwargs, tr_kwargs = {}, {}
    for key, raw in merged.items():
        if key not in _DATASET_FIELDS and key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse_value(key, raw)
        if key in _DATASET_FIELDS:
            ds_kwargs[key] = value
        if key in _TRAIN_FIELDS:
            tr_kwargs[key] = value
    return DatasetSpec(**ds_kwargs), TrainConfig(**tr_kwargs)


def _run_id(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:10]


def _require_file(path, what: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    spec, _ = build_configs(args)
    tset = datagen.generate(spec)
    write_triplets(tset, args.out)
    held = tset.indices(datagen.EVAL_HELDOUT)
    acc = datagen.batched_contrastive_accuracy(tset.image_feats[held], tset.text_feats[held])
    print(f"wrote {args.out}")
    print(
        f"classes={spec.classes} samples_per_class={spec.samples_per_class} "
        f"views={spec.views} feature_dim={spec.feature_dim} seed={spec.seed}"
    )
    print(f"shift_strength={tset.spec.shift_strength:.6f} heldout_pre_adapter_accuracy={acc:.4f}")
    return EXIT_OK


def _metrics_path(args) -> str:
    return args.metrics if args.metrics else args.out + ".metrics.csv"


def cmd_pretrain(args) -> int:
    _require_file(args.data, "dataset")
    ds_spec, cfg = build_configs(args)
    data = read_triplets(args.data)
    d = data.spec.feature_dim
    adapter_hidden = max(1, d // 2)
    resume = None
    if args.resume:
        _require_file(args.resume, "resume checkpoint")
        resume = load_checkpoint(args.resume)
    run_id = _run_id("pretrain", args.stage, str(cfg), str(data.spec))

    if args.stage == "1":
        cia = init_adapter(d, adapter_hidden, cfg.seed + 101, "cia")
        cia, rows, optim = train.train_stage1(data, cia, cfg, resume=resume)
        save_checkpoint(
            args.out, train.model_blocks(cia), optim, cfg, optim.step, extra={"trained_stage": "stage1"}
        )
    else:
        cia = None
        if args.stage == "2" and not args.no_cia:
            if not args.cia:
                print("stage 2 needs --cia <stage-1 checkpoint> (or --no-cia)", file=sys.stderr)
                return EXIT_MISSING
            _require_file(args.cia, "stage-1 checkpoint")
            cia, _, _, _ = train.blocks_to_model(load_checkpoint(args.cia).blocks)
            if cia is None:
                raise IncompatibilityError(f"{args.cia} holds no cia parameters")
            if cia.w1.shape[0] != d:
                raise IncompatibilityError(
                    f"cia feature dim {cia.w1.shape[0]} vs dataset feature dim {d}"
                )
        encoder = init_point_encoder(POINT_ENCODER_HIDDEN, d, cfg.seed + 202)
        iaa = init_adapter(d, adapter_hidden, cfg.seed + 303, "dual")
        taa = init_adapter(d, adapter_hidden, cfg.seed + 404, "dual")
        if args.stage == "2":
            encoder, iaa, taa, rows, optim = train.train_stage2(
                data, cia, encoder, iaa, taa, cfg, resume=resume, views_limit=args.views
            )
            extra = {"trained_stage": "stage2", "no_cia": str(int(args.no_cia))}
            save_checkpoint(
                args.out, train.model_blocks(cia, encoder, iaa, taa), optim, cfg, optim.step, extra=extra
            )
        else:  # joint
            if resume is not None:
                raise ConfigError("--resume is not supported for --stage joint")
            cia = init_adapter(d, adapter_hidden, cfg.seed + 101, "cia")
            cia, encoder, iaa, taa, rows, optim = train.train_onestage(
                data, cia, encoder, iaa, taa, cfg, views_limit=args.views
            )
            save_checkpoint(
                args.out,
                train.model_blocks(cia, encoder, iaa, taa),
                optim,
                cfg,
                optim.step,
                extra={"trained_stage": "joint"},
            )
    train.write_metrics_csv(rows, _metrics_path(args), run_id)
    last = rows[-1]
    summary = " ".join(f"{k}={v:.6f}" for k, v in last.items() if k not in ("stage", "epoch"))
    print(f"stage={last['stage']} epochs={last['epoch']} {summary}")
    print(f"wrote {args.out} and {_metrics_path(args)}")
    return EXIT_OK


def _eval_split_indices(data, split: str) -> np.ndarray:
    if split == "heldout":
        return data.indices(datagen.EVAL_HELDOUT)
    if split == "seen":
        return np.sort(np.concatenate([data.indices(datagen.PRETRAIN), data.indices(datagen.EVAL_SEEN)]))
    if split == "all":
        return np.arange(data.labels.size)
    raise ConfigError(f"unknown split {split!r}")


def cmd_eval(args) -> int:
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.data, "dataset")
    ck = load_checkpoint(args.ckpt)
    data = read_triplets(args.data)
    cia, encoder, iaa, taa = train.blocks_to_model(ck.blocks)
    if encoder is None or iaa is None or taa is None:
        raise IncompatibilityError("checkpoint lacks the point encoder or dual adapters; run stage 2 first")
    d = data.spec.feature_dim
    if encoder.out_dim != d:
        raise IncompatibilityError(f"checkpoint feature dim {encoder.out_dim} vs dataset feature dim {d}")

    idx = _eval_split_indices(data, args.split)
    if idx.size == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    f_vp, f_sp = evaluate.dual_features(data, encoder, iaa, taa, idx)
    labels = data.labels[idx]
    rows = []

    if args.task == "zeroshot":
        ks = sorted({int(k) for k in args.topk.split(",")})
        bank = evaluate.build_category_bank(data, np.unique(labels))
        accs = evaluate.zeroshot_topk(f_vp, f_sp, labels, bank, args.mode, ks)
        for k in ks:
            rows.append(evaluate.report_row(f"zeroshot_top{k}", args.mode, args.split, accs[k]))
    elif args.task == "linear":
        feats = {"both": np.concatenate([f_vp, f_sp], axis=1), "iaa": f_vp, "taa": f_sp}[
            evaluate.canonical_mode(args.mode)
        ]
        acc = evaluate.linear_probe(feats, labels, seed=ck.config.seed)
        rows.append(evaluate.report_row("linear_probe", args.mode, args.split, acc))
    elif args.task == "fewshot":
        feats = np.concatenate([f_vp, f_sp], axis=1)
        res = evaluate.fewshot_eval(feats, labels, args.ways, args.shots, args.trials, seed=ck.config.seed)
        rows.append(evaluate.report_row(f"fewshot_{args.ways}way_{args.shots}shot_mean", "both", args.split, res.mean))
        rows.append(evaluate.report_row(f"fewshot_{args.ways}way_{args.shots}shot_std", "both", args.split, res.std))
        print(f"{args.ways}-way {args.shots}-shot over {args.trials} trials: {res.mean:.4f} +/- {res.std:.4f}")
    elif args.task == "retrieve":
        qi = args.query_index
        if not 0 <= qi < data.labels.size:
            raise ConfigError(f"query index {qi} outside dataset of {data.labels.size} samples")
        if args.query_modality == "text":
            query = data.text_feats[qi]
        else:
            n_views = args.views if args.views else 1
            if not 1 <= n_views <= data.spec.views:
                raise IncompatibilityError(f"requested {n_views} views, dataset stores {data.spec.views}")
            adapted = train.adapt_views(data.image_feats[qi : qi + 1, :n_views], cia, CiaConfig(ck.config.alpha))
            query = nk.l2_normalize(adapted[0].mean(axis=0)).value
        ranked = evaluate.retrieve(query, f_vp, f_sp, args.query_modality, args.topk_retrieve)
        hits = idx[ranked]
        print(f"query sample {qi} ({args.query_modality}) top-{len(hits)}: {list(map(int, hits))}")
        for rank, sample in enumerate(hits):
            rows.append(evaluate.report_row(f"retrieve_rank{rank + 1}", args.query_modality, args.split, int(sample)))
    else:
        raise ConfigError(f"unknown task {args.task!r}")

    print(evaluate.format_report(rows))
    if args.report:
        evaluate.write_report_csv(rows, args.report)
        print(f"wrote {args.report}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.max_rel_error < TOLERANCE else "FAIL"
        print(f"{r.name.ljust(width)}  {r.max_rel_error:.3e}  {status}")
    if not all_pass(results):
        return EXIT_CHECK_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="override the seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tamm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic triplet dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("pretrain", help="run a pre-training stage")
    _add_config_flags(p)
    p.add_argument("--stage", choices=["1", "2", "joint"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cia", help="stage-1 checkpoint feeding stage 2")
    p.add_argument("--no-cia", action="store_true", help="stage 2 without image re-alignment")
    p.add_argument("--views", type=int, help="restrict training to the first N image views")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metrics", help="metrics CSV path (default: OUT.metrics.csv)")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--task", choices=["zeroshot", "linear", "fewshot", "retrieve"], required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["both", "iaa", "taa"], default="both")
    p.add_argument("--split", choices=["heldout", "seen", "all"], default="heldout")
    p.add_argument("-k", "--topk", default="1,3,5", help="comma-separated k list for zeroshot")
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=10)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--views", type=int, help="image views used for image-query retrieval")
    p.add_argument("--query-index", type=int, default=0)
    p.add_argument("--query-modality", choices=["text", "image"], default="text")
    p.add_argument("--topk-retrieve", type=int, default=5)
    p.add_argument("--report", help="write the report rows to this CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ShapeError, IncompatibilityError, FormatError) as exc:
        print(f"incompatible artifacts: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (DegenerateVectorError, NumericError) as exc:
        print(f"numeric check failure: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
