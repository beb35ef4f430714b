"""``uip`` command-line front end.

Structural failures (bad config, missing files, mismatched checkpoints, empty
selections, zero model difference, failed probes, out-of-range parameters)
print one JSON object ``{"error": kind, "message": ...}`` to stderr and exit
with status 2. Attack quality is never an error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .. import data, defenses, inversion, label_inference, training, unlearning
from ..data import Dataset
from ..oracle import ModelOracle
from ..tensor import ModelState
from . import checkpoint as ckpt_io
from . import records
from .config import ConfigError, DefenseSection, ExperimentConfig, load_config
from .pipeline import (approx_config, build_arch, flatten_rows, inversion_config, load_source,
                       make_splits, train_config, zoo_config)
from .seeds import derive_seed, lineage


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load_ckpt(path, stage: Optional[str] = None) -> ckpt_io.Checkpoint:
    try:
        return ckpt_io.load_checkpoint(path, stage=stage)
    except FileNotFoundError:
        raise CliError("file_not_found", f"checkpoint not found: {path}") from None


def _same_arch(a: ModelState, b: ModelState, what: str) -> None:
    if a.arch != b.arch:
        raise CliError("arch_mismatch", f"{what}: {a.arch.to_text()} vs {b.arch.to_text()}")


def _load_dataset(path, model: Optional[ModelState] = None) -> Dataset:
    if not Path(path).is_file():
        raise CliError("file_not_found", f"dataset not found: {path}")
    ds = data.load_image_bin(path)
    if model is not None:
        shape = model.arch.input_shape
        if int(np.prod(ds.shape)) != int(np.prod(shape)):
            raise CliError("arch_mismatch", f"{path}: samples of shape {ds.shape} do not fit input {shape}")
        ds = Dataset(ds.features.reshape(len(ds), *shape), ds.labels, ds.num_classes)
    return flatten_rows(ds) if model is None else ds


def _config(path) -> Optional[ExperimentConfig]:
    return None if path is None else load_config(path)


def _hash(**fields) -> str:
    blob = json.dumps(records._plain(fields), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _results_dir(args, default: Path) -> Path:
    return Path(args.results_dir) if args.results_dir else default


def _emit(args, command, chash, master, body, started, default_dir):
    path = records.append_record(_results_dir(args, default_dir), command, chash, lineage(master), body,
                                 {"total": time.perf_counter() - started})
    print(json.dumps({"record": str(path), **records._plain(body)}, sort_keys=True))
    return path


def _metrics(model: ModelState, **sets) -> dict:
    return {name: training.evaluate(model, ds) for name, ds in sets.items() if ds is not None}


def _slug(text: str) -> str:
    return text.replace(":", "-").replace(",", "_")


def _param_values(text: Optional[str], fallback) -> list:
    if text is None:
        return list(fallback)
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError("parameter_range", f"cannot parse --param {text!r}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    ds = load_source(cfg)
    if cfg.arch.type == "mlp":
        ds = flatten_rows(ds)
    splits = make_splits(cfg, ds)
    arch = build_arch(cfg, ds.shape, ds.num_classes)
    pre, ft = train_config(cfg, "pretrain"), train_config(cfg, "finetune")
    m0, m = training.pretrain_finetune(arch, splits.pretrain, splits.private, pre, ft,
                                       init_seed=derive_seed(cfg.seed, "init"))
    ckpt_io.save_checkpoint(out / "pretrained.uipm", m0, "pretrained", cfg.seed)
    ckpt_io.save_checkpoint(out / "original.uipm", m, "original", cfg.seed)
    (out / "data").mkdir(parents=True, exist_ok=True)
    for name in ("pretrain", "private", "extra", "val"):
        part = getattr(splits, name)
        if part is not None:
            data.save_image_bin(part, out / "data" / f"{name}.uipd")
    body = {
        "arch": arch.to_text(),
        "sizes": {"pretrain": len(splits.pretrain), "private": len(splits.private),
                  "extra": 0 if splits.extra is None else len(splits.extra), "val": len(splits.val)},
        "stage_metrics": {
            "pretrained": _metrics(m0, val=splits.val, train=splits.pretrain),
            "original": _metrics(m, val=splits.val, private=splits.private),
        },
    }
    _emit(args, "train", cfg.content_hash(), cfg.seed, body, started, out / "results")
    return 0


def cmd_unlearn(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    method = args.method or cfg.unlearn.method
    select = args.select or cfg.unlearn.select
    m0 = _load_ckpt(out / "pretrained.uipm", "pretrained").model
    m = _load_ckpt(out / "original.uipm", "original").model
    _same_arch(m0, m, "pretrained vs original checkpoint")
    du = _load_dataset(out / "data" / "private.uipd", m)
    selection = data.parse_selection(select, derive_seed(cfg.seed, "select"))
    _, removed, idx = data.select_unlearn(du, selection)
    stem = args.out or f"unlearned-{method}-{_slug(select)}"
    body = {"method": method, "select": select, "removed_indices": idx, "removed_labels": removed.labels}
    if method == "approx":
        mu, grad_u = unlearning.approx_unlearn(m, m0, removed, approx_config(cfg, len(du)))
        np.save(out / f"{stem}.grad.npy", grad_u)
        body["grad_u_norm"] = float(np.linalg.norm(grad_u))
    else:
        mu = unlearning.exact_unlearn(m0, du, idx, train_config(cfg, "finetune"),
                                      seed=derive_seed(cfg.seed, "retrain"))
    ckpt_io.save_checkpoint(out / f"{stem}.uipm", mu, "unlearned", cfg.seed)
    data.save_image_bin(removed, out / f"{stem}.removed.uipd")
    val_path = out / "data" / "val.uipd"
    val = _load_dataset(val_path, m) if val_path.exists() else None
    body["checkpoint"] = f"{stem}.uipm"
    body["stage_metrics"] = {"unlearned": _metrics(mu, val=val, removed=removed)}
    _emit(args, "unlearn", cfg.content_hash(method=method, select=select), cfg.seed, body, started,
          out / "results")
    return 0


def _parse_truth(text: str):
    path, sep, index = text.rpartition(",")
    if not sep:
        return text, None
    try:
        return path, [int(index)]
    except ValueError:
        return text, None


def _dump_images(out: Path, prefix: str, xs: np.ndarray) -> list:
    names = []
    if xs.ndim == 4:
        for i, img in enumerate(xs):
            name = f"{prefix}_{i}." + ("ppm" if img.shape[0] == 3 else "pgm")
            inversion.write_pnm(out / name, img if img.shape[0] == 3 else img[0])
            names.append(name)
    else:
        name = f"{prefix}.csv"
        np.savetxt(out / name, xs.reshape(len(xs), -1), delimiter=",", fmt="%.17g")
        names.append(name)
    return names


def cmd_attack_feature(args) -> int:
    started = time.perf_counter()
    cfg = _config(args.config)
    orig = _load_ckpt(args.original)
    unl = _load_ckpt(args.unlearned)
    _same_arch(orig.model, unl.model, "original vs unlearned checkpoint")
    master = cfg.seed if cfg is not None else unl.master_seed
    convention = args.convention or (cfg.attack.feature.convention if cfg else inversion.RECONSTRUCTION_DIFF)
    est = inversion.estimate_gradient(orig.model, unl.model, convention)
    if not np.any(est.values):
        raise CliError("zero_difference", "original and unlearned parameters are identical")

    truth = labels = None
    if args.truth:
        tpath, tidx = _parse_truth(args.truth)
        tds = _load_dataset(tpath, orig.model)
        tidx = list(range(len(tds))) if tidx is None else tidx
        if any(not 0 <= i < len(tds) for i in tidx):
            raise CliError("selection_error", f"truth index outside [0, {len(tds)})")
        truth = tds.features[tidx]
        labels = tds.labels[tidx]
    if args.label is not None:
        labels = np.array([int(v) for v in args.label.split(",")])
        if labels.min() < 0 or labels.max() >= orig.model.arch.num_classes:
            raise CliError("parameter_range", f"--label outside [0, {orig.model.arch.num_classes})")
    batch = len(truth) if truth is not None else (args.batch_count or 1)
    mode = "variable" if labels is None else "known"
    icfg = inversion_config(cfg, batch, mode, seed=None if cfg else derive_seed(master, "feature_attack"))
    if args.steps:
        icfg = inversion.InversionConfig(**{**icfg.__dict__, "steps": args.steps})
    try:
        result = inversion.invert(orig.model, est, icfg, labels=labels, ground_truth=truth, threads=args.threads)
    except inversion.ZeroGradientError as exc:
        raise CliError("zero_gradient", str(exc)) from None

    out = Path(args.out) if args.out else Path(args.unlearned).parent / f"attack-{Path(args.unlearned).stem}"
    out.mkdir(parents=True, exist_ok=True)
    body = {"convention": convention, "label_mode": mode, "steps": icfg.steps, "restarts": icfg.restarts,
            "tv_weight": icfg.tv_for(orig.model.arch.input_shape), **result.to_record(),
            "recovered_files": _dump_images(out, "recovered", result.features)}
    if truth is not None:
        _dump_images(out, "truth", truth)
        body["truth"] = {"dataset": Path(args.truth.rsplit(",", 1)[0]).name, "indices": tidx}
    chash = _hash(command="attack-feature", arch=orig.model.arch.to_text(), convention=convention,
                  mode=mode, steps=icfg.steps, restarts=icfg.restarts, lr=icfg.lr, tv=icfg.tv_weight,
                  batch=batch, truth=args.truth is not None, config=None if cfg is None else cfg.content_hash())
    _emit(args, "attack-feature", chash, master, body, started, out.parent / "results")
    return 0


def _load_or_build_probes(args, orig, zcfg, cache: Path):
    digest = ckpt_io.digest(args.original)
    meta_path = cache.with_name(cache.name + ".json")
    if cache.exists():
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        if meta.get("original_sha256") not in (None, digest):
            raise CliError("cache_mismatch", f"{cache} was built for a different original model")
        probes = label_inference.ProbingSet.load(cache)
        if probes.m != args.probes or probes.num_classes != orig.model.arch.num_classes:
            raise CliError("cache_mismatch", f"{cache} holds m={probes.m}, requested {args.probes}")
        return probes, True
    probes = label_inference.build_probing_set(ModelOracle(orig.model), orig.model.arch.num_classes,
                                               orig.model.arch.input_shape, args.probes, zcfg,
                                               threads=args.threads)
    cache.parent.mkdir(parents=True, exist_ok=True)
    probes.save(cache)
    meta_path.write_text(json.dumps({"original_sha256": digest, "m": args.probes}, sort_keys=True))
    return probes, False


def cmd_attack_label(args) -> int:
    started = time.perf_counter()
    cfg = _config(args.config)
    orig = _load_ckpt(args.original)
    unls = [(p, _load_ckpt(p)) for p in args.unlearned]
    for p, u in unls:
        _same_arch(orig.model, u.model, f"original vs {p}")
    master = cfg.seed if cfg is not None else orig.master_seed
    zcfg = zoo_config(cfg)
    if cfg is None:
        zcfg = label_inference.ZooConfig(seed=derive_seed(master, "label_attack"))
    c = orig.model.arch.num_classes
    if not 1 <= args.topk <= c:
        raise CliError("parameter_range", f"--topk must lie in [1, {c}]")
    if args.probes < 1:
        raise CliError("parameter_range", "--probes must be >= 1")
    base = Path(args.original).parent
    cache = Path(args.cache) if args.cache else (
        base / "probes" / f"probes-{ckpt_io.digest(args.original)[:16]}-m{args.probes}-s{zcfg.seed}.npz")
    probes, cached = _load_or_build_probes(args, orig, zcfg, cache)
    results = []
    for p, u in unls:
        deltas = label_inference.probe_delta(probes, ModelOracle(u.model))
        results.append({"unlearned": Path(p).name, "inferred": label_inference.infer_labels(deltas, args.topk),
                        "beta": deltas.beta, "delta": deltas.delta, "probe_counts": deltas.counts})
    body = {
        "probes_per_class": args.probes,
        "topk": args.topk,
        "converged_per_class": [len(probes.converged(k)) for k in range(c)],
        "probe_queries": sum(s.query_count for k in range(c) for s in probes.probes[k]),
        "results": results,
    }
    chash = _hash(command="attack-label", arch=orig.model.arch.to_text(), m=args.probes, k=args.topk,
                  zoo={k: v for k, v in zcfg.__dict__.items() if k != "seed"},
                  config=None if cfg is None else cfg.content_hash())
    print(json.dumps({"probe_cache": str(cache), "cache_hit": cached}), file=sys.stderr)
    _emit(args, "attack-label", chash, master, body, started, base / "results")
    return 0


def cmd_defend(args) -> int:
    started = time.perf_counter()
    cfg = _config(args.config)
    unl = _load_ckpt(args.unlearned)
    base = Path(args.unlearned).parent
    master = cfg.seed if cfg is not None else unl.master_seed
    dsec = cfg.defense if cfg is not None else DefenseSection()
    values = _param_values(args.param, getattr(dsec, args.method))
    if not values:
        raise CliError("parameter_range", "no defense parameter given")
    for v in values:
        bad = ((args.method == "prune" and not 0 <= v < 1) or (args.method == "obfuscate" and v < 0)
               or (args.method == "finetune" and v < 0))
        if bad:
            rng = {"prune": "[0, 1)", "obfuscate": "[0, inf)", "finetune": "[0, inf)"}[args.method]
            raise CliError("parameter_range", f"{args.method} parameter {v} outside {rng}")
    val = _load_dataset(Path(args.val) if args.val else base / "data" / "val.uipd", unl.model)
    seed = derive_seed(master, "defense")
    stem = Path(args.unlearned).stem
    reports = []
    if args.method == "obfuscate":
        orig = _load_ckpt(args.original or base / "original.uipm")
        _same_arch(orig.model, unl.model, "original vs unlearned checkpoint")
        gpath = Path(args.grad) if args.grad else base / f"{stem}.grad.npy"
        if not gpath.is_file():
            raise CliError("file_not_found", f"unlearning gradient not found: {gpath}")
        grad_u = np.load(gpath)
        if grad_u.shape != (unl.model.param_count,):
            raise CliError("arch_mismatch", f"{gpath}: gradient shape {grad_u.shape}")
    if args.method == "finetune":
        extra = _load_dataset(Path(args.extra) if args.extra else base / "data" / "extra.uipd", unl.model)
    files = []
    for v in values:
        if args.method == "prune":
            model = defenses.prune_model(unl.model, v)
        elif args.method == "obfuscate":
            g = defenses.obfuscate_unlearn_gradient(grad_u, defenses.ObfuscationConfig(dsec.clip_norm, v, seed))
            model = unlearning.apply_unlearning_gradient(orig.model, g)
        else:
            model = defenses.finetune_defense(unl.model, extra, v, dsec.finetune_epochs, seed)
        name = f"defended-{args.method}-{v:g}-{stem}.uipm"
        ckpt_io.save_checkpoint(base / name, model, "defended", master)
        try:
            rep = defenses.report(args.method, v, model, unl.model, val)
        except ZeroDivisionError as exc:
            raise CliError("zero_accuracy", str(exc)) from None
        reports.append({**rep.to_record(), "checkpoint": name})
        files.append(name)
    body = {"method": args.method, "unlearned": Path(args.unlearned).name, "reports": reports}
    if args.method == "obfuscate":
        body["clip_norm"] = dsec.clip_norm
    chash = _hash(command="defend", arch=unl.model.arch.to_text(), method=args.method, values=values,
                  clip=dsec.clip_norm, epochs=dsec.finetune_epochs,
                  config=None if cfg is None else cfg.content_hash())
    _emit(args, "defend", chash, master, body, started, base / "results")
    return 0


def cmd_report(args) -> int:
    src = Path(args.results)
    if not src.is_dir():
        raise CliError("file_not_found", f"results directory not found: {src}")
    try:
        found = records.read_records(src)
        if args.command_filter:
            found = [r for r in found if r.get("command") == args.command_filter]
        rows = records.aggregate(found)
    except records.RecordError as exc:
        raise CliError("record_error", str(exc)) from None
    text = records.to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="max worker threads for restarts / probes")
    common.add_argument("--results-dir", help="where result records go (default: next to the outputs)")

    p = argparse.ArgumentParser(prog="uip", description="Unlearning inversion attack harness")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="pretrain M_0 and fine-tune M")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("unlearn", parents=[common], help="produce an unlearned checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--method", choices=("exact", "approx"))
    s.add_argument("--select", help="index:I[,J..] | class:C[:P] | classes:C[,D..]")
    s.add_argument("--out", help="output file stem inside the run directory")
    s.set_defaults(func=cmd_unlearn)

    s = sub.add_parser("attack-feature", parents=[common], help="invert the model difference")
    s.add_argument("--original", required=True)
    s.add_argument("--unlearned", required=True)
    s.add_argument("--truth", help="dataset path, optionally ',index' (default: every sample)")
    s.add_argument("--label", help="known label(s), comma-separated")
    s.add_argument("--config")
    s.add_argument("--convention", choices=(inversion.RECONSTRUCTION_DIFF, inversion.DIRECT_DIFF))
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-count", type=int)
    s.add_argument("--out", help="directory for recovered images")
    s.set_defaults(func=cmd_attack_feature)

    s = sub.add_parser("attack-label", parents=[common], help="infer the unlearned class(es)")
    s.add_argument("--original", required=True)
    s.add_argument("--unlearned", required=True, nargs="+")
    s.add_argument("--probes", type=int, default=10)
    s.add_argument("--topk", type=int, default=1)
    s.add_argument("--cache", help="probing-set cache file (.npz)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_attack_label)

    s = sub.add_parser("defend", parents=[common], help="post-process an unlearned model")
    s.add_argument("--unlearned", required=True)
    s.add_argument("--method", required=True, choices=("obfuscate", "prune", "finetune"))
    s.add_argument("--param", help="value or comma-separated sweep (default: config sweep)")
    s.add_argument("--original")
    s.add_argument("--grad")
    s.add_argument("--val")
    s.add_argument("--extra")
    s.add_argument("--config")
    s.set_defaults(func=cmd_defend)

    s = sub.add_parser("report", help="aggregate result records into CSV")
    s.add_argument("--results", required=True)
    s.add_argument("--out")
    s.add_argument("--command", dest="command_filter", help="only aggregate records of this command")
    s.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        return _fail("parameter_range", "--threads must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except ConfigError as exc:
        return _fail("config_error", str(exc))
    except FileNotFoundError as exc:
        return _fail("file_not_found", str(exc))
    except ckpt_io.CheckpointError as exc:
        return _fail("checkpoint_error", str(exc))
    except data.SelectionError as exc:
        return _fail("selection_error", str(exc))
    except data.DataFormatError as exc:
        return _fail("data_format", str(exc))
    except label_inference.ProbeConstructionError as exc:
        return _fail("probe_construction", str(exc))
    except training.TrainingDiverged as exc:
        return _fail("training_diverged", str(exc))


if __name__ == "__main__":
    sys.exit(main())
