"""Command-line entry point.

Subcommands: synth, train, evaluate, query, selfcheck. Option precedence is
flags > config file (key=value lines) > defaults; every run writes its
resolved configuration next to its outputs. Exit codes: 0 success, 1
test/assertion failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import selfcheck as selfcheck_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import generate_synthetic_dataset, load_manifest, save_manifest, \
    split_and_subsample, DatasetManifest
from .errors import ConfigError, CrossmodalError, DataIOError, DomainError, \
    FormatError, ParseError
from .metrics import METRIC_NAMES, cross_task_average, score_retrieval
from .model import Model, ModelConfig, STRATEGIES
from .retrieval import build_archive, export_results, leave_one_out_eval, query_topk
from .tensorfile import read_matrix
from .train import FeatureCache, TrainConfig, fit, load_velocities
from .tensor import Tensor

_USAGE_ERRORS = (ConfigError, FormatError)
_IO_ERRORS = (DataIOError, ParseError, OSError)


def _read_config_file(path, known_keys) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known_keys:
            raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        raw = _read_config_file(config_path, set(defaults))
        for key, value in raw.items():
            resolved[key] = _coerce(value, defaults[key])
    for key in defaults:
        if hasattr(args, key):
            resolved[key] = getattr(args, key)
    return resolved


def _write_resolved(resolved: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={resolved[key]}" for key in sorted(resolved)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n",
                                             encoding="utf-8")


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

_SYNTH_DEFAULTS = dict(pairs=16, grid=12, patch=4, dim=16, seed=0,
                       no_change_fraction=0.25, out="")


def cmd_synth(args) -> int:
    resolved = _resolve(_SYNTH_DEFAULTS, args)
    out_dir = Path(resolved["out"])
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out_dir} is not empty; pass --force")
    manifest, _edits = generate_synthetic_dataset(
        resolved["pairs"], out_dir, seed=resolved["seed"], grid=resolved["grid"],
        patch=resolved["patch"], embed_dim=resolved["dim"],
        no_change_fraction=resolved["no_change_fraction"])
    _write_resolved(resolved, out_dir)
    print(out_dir / "manifest.jsonl")
    return 0


_TRAIN_DEFAULTS = dict(manifest="", out="", fusion="tff", batch_size=32, lr=0.01,
                       weight_decay=5e-4, momentum=0.9, epochs=30, seed=0,
                       clip_style_kappa=False, heads=4, head_dim=0,
                       fusion_stages=3, ffn_hidden=0, dropout=0.1,
                       text_vocab=4096, fractions="0.8,0.1,0.1",
                       nochange_keep=1.0)


def _parse_fractions(text: str):
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"fractions must be three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _probe_embed_dim(manifest: DatasetManifest) -> int:
    if not manifest.entries:
        raise ConfigError("manifest is empty")
    return read_matrix(manifest.resolve(manifest.entries[0].emb_t1)).shape[1]


def cmd_train(args) -> int:
    resolved = _resolve(_TRAIN_DEFAULTS, args)
    if not resolved["manifest"] or not resolved["out"]:
        raise ConfigError("train requires --manifest and --out")
    out_dir = Path(resolved["out"])
    manifest = load_manifest(resolved["manifest"])
    fractions = _parse_fractions(resolved["fractions"])
    train_cfg = TrainConfig(
        batch_size=resolved["batch_size"], lr=resolved["lr"],
        weight_decay=resolved["weight_decay"], momentum=resolved["momentum"],
        epochs=resolved["epochs"], seed=resolved["seed"],
        strategy=resolved["fusion"], clip_style_kappa=resolved["clip_style_kappa"])

    train_m, val_m, test_m = split_and_subsample(
        manifest, fractions, resolved["nochange_keep"], resolved["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    splits_dir = out_dir / "splits"
    save_manifest(train_m, splits_dir / "train.jsonl")
    save_manifest(val_m, splits_dir / "val.jsonl")
    save_manifest(test_m, splits_dir / "test.jsonl")
    eval_m = DatasetManifest(val_m.entries + test_m.entries, manifest.root)
    save_manifest(eval_m, splits_dir / "eval.jsonl")

    if getattr(args, "resume", None):
        model = load_checkpoint(args.resume)
        velocities = None
        vel_path = Path(args.resume).with_suffix(".velocity.npz")
        if vel_path.exists():
            velocities = load_velocities(vel_path)
    else:
        model_cfg = ModelConfig(
            strategy=resolved["fusion"], embed_dim=_probe_embed_dim(manifest),
            text_vocab=resolved["text_vocab"], encoder_seed=resolved["seed"],
            heads=resolved["heads"], head_dim=resolved["head_dim"],
            stages=resolved["fusion_stages"], ffn_hidden=resolved["ffn_hidden"],
            dropout=resolved["dropout"],
            clip_style_kappa=resolved["clip_style_kappa"])
        model = Model(model_cfg, resolved["seed"])
        velocities = None

    _write_resolved(resolved, out_dir)
    with open(out_dir / "train_log.jsonl", "a" if getattr(args, "resume", None)
              else "w", encoding="utf-8") as log:
        fit(model, train_m, val_m if len(val_m) >= 2 else None, train_cfg,
            out_dir=out_dir, log=log, velocities=velocities)
    print(out_dir / "final.tsrc")
    return 0


_EVAL_DEFAULTS = dict(checkpoint="", manifest="", out="", rounds=5, k=5, seed=0,
                      scope="all", text_archive="sampled")


def cmd_evaluate(args) -> int:
    resolved = _resolve(_EVAL_DEFAULTS, args)
    for key in ("checkpoint", "manifest", "out"):
        if not resolved[key]:
            raise ConfigError(f"evaluate requires --{key}")
    if resolved["scope"] not in ("all", "full", "change", "no-change", "no_change"):
        raise ConfigError(f"unknown scope {resolved['scope']!r}")
    out_dir = Path(resolved["out"])
    model = load_checkpoint(resolved["checkpoint"])
    manifest = load_manifest(resolved["manifest"])
    cache = FeatureCache(model, manifest)

    scopes = ("full", "change", "no_change") if resolved["scope"] == "all" \
        else (resolved["scope"].replace("-", "_"),)
    runs = []
    reports = {}
    for scope in scopes:
        for task in ("t2i", "i2t"):
            run = leave_one_out_eval(
                model, manifest, task, scope, rounds=resolved["rounds"],
                k=resolved["k"], seed=resolved["seed"],
                text_archive_mode=resolved["text_archive"], cache=cache)
            runs.append(run)
            reports[(task, scope)] = score_retrieval(run)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(resolved, out_dir)
    with open(out_dir / "results.jsonl", "w", encoding="utf-8") as fh:
        export_results(runs, fh)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        for scope in scopes:
            avg = cross_task_average(reports[("t2i", scope)], reports[("i2t", scope)])
            for task in ("t2i", "i2t"):
                fh.write(json.dumps(reports[(task, scope)].to_document(avg)) + "\n")
    print(out_dir / "report.json")
    return 0


_QUERY_DEFAULTS = dict(checkpoint="", manifest="", k=5, text="", pair_id="",
                       text_archive="all")


def cmd_query(args) -> int:
    resolved = _resolve(_QUERY_DEFAULTS, args)
    for key in ("checkpoint", "manifest"):
        if not resolved[key]:
            raise ConfigError(f"query requires --{key}")
    if resolved["k"] < 1:
        raise ConfigError(f"k must be >= 1, got {resolved['k']}")
    if bool(resolved["text"]) == bool(resolved["pair_id"]):
        raise ConfigError("query needs exactly one of --text or --pair-id")
    model = load_checkpoint(resolved["checkpoint"])
    manifest = load_manifest(resolved["manifest"])
    cache = FeatureCache(model, manifest)
    if resolved["text"]:
        archive = build_archive(model, manifest, "image", cache=cache)
        cls = model.encode_caption(resolved["text"])
        query_vec = model.text_features(Tensor(cls)).data
        for _i, pid, score in query_topk(archive, query_vec, resolved["k"]):
            print(f"{pid}\t{score:.6f}\t{archive.captions[pid][0]}")
    else:
        mode = "all" if resolved["text_archive"] == "all" else None
        archive = build_archive(model, manifest, "text", caption_indices=mode,
                                cache=cache)
        if resolved["pair_id"] not in cache.ids:
            raise KeyError(f"unknown pair id {resolved['pair_id']!r}")
        row = cache.ids.index(resolved["pair_id"])
        fx, _fy = _eval_feats_cached(model, cache)
        hits = query_topk(archive, fx[row], resolved["k"])
        for i, pid, score in hits:
            cap = archive.captions[pid][archive.caption_indices[i]] \
                if archive.caption_indices[i] >= 0 else archive.captions[pid][0]
            print(f"{pid}\t{score:.6f}\t{cap}")
    return 0


def _eval_feats_cached(model, cache):
    from .train import eval_features
    return eval_features(model, cache)


def cmd_selfcheck(args) -> int:
    rows = selfcheck_mod.run_all()
    failed = 0
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name} ({detail})")
        if not ok:
            failed += 1
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmodal-tsr",
        description="Train and query a cross-modal text / bitemporal-image "
                    "retrieval model.")
    sub = parser.add_subparsers(dest="command", required=True)
    sup = argparse.SUPPRESS

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=sup)
    p.add_argument("--grid", type=int, default=sup)
    p.add_argument("--patch", type=int, default=sup)
    p.add_argument("--dim", type=int, default=sup)
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("--no-change-fraction", dest="no_change_fraction", type=float,
                   default=sup)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", default=sup)
    p.add_argument("--out", default=sup)
    p.add_argument("--fusion", choices=STRATEGIES, default=sup)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=sup)
    p.add_argument("--lr", type=float, default=sup)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=sup)
    p.add_argument("--momentum", type=float, default=sup)
    p.add_argument("--epochs", type=int, default=sup)
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("--clip-style-kappa", dest="clip_style_kappa",
                   action="store_true", default=sup)
    p.add_argument("--heads", type=int, default=sup)
    p.add_argument("--head-dim", dest="head_dim", type=int, default=sup)
    p.add_argument("--fusion-stages", dest="fusion_stages", type=int, default=sup)
    p.add_argument("--ffn-hidden", dest="ffn_hidden", type=int, default=sup)
    p.add_argument("--dropout", type=float, default=sup)
    p.add_argument("--text-vocab", dest="text_vocab", type=int, default=sup)
    p.add_argument("--fractions", default=sup)
    p.add_argument("--nochange-keep", dest="nochange_keep", type=float, default=sup)
    p.add_argument("--resume", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="leave-one-out evaluation and scoring")
    p.add_argument("--checkpoint", default=sup)
    p.add_argument("--manifest", default=sup)
    p.add_argument("--out", default=sup)
    p.add_argument("--rounds", type=int, default=sup)
    p.add_argument("--k", type=int, default=sup)
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("--scope", default=sup,
                   choices=("all", "full", "change", "no-change", "no_change"))
    p.add_argument("--text-archive", dest="text_archive", default=sup,
                   choices=("sampled", "all"))
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("query", help="run one retrieval query")
    p.add_argument("--checkpoint", default=sup)
    p.add_argument("--manifest", default=sup)
    p.add_argument("--text", default=sup)
    p.add_argument("--pair-id", dest="pair_id", default=sup)
    p.add_argument("--k", type=int, default=sup)
    p.add_argument("--text-archive", dest="text_archive", default=sup,
                   choices=("sampled", "all"))
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("selfcheck", help="run built-in verification suites")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (CrossmodalError, KeyError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
