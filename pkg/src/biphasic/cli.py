"""Command line entry point: ``biphasic <subcommand> ...``.

Exit codes: 0 on success, 1 on runtime failures (divergence, I/O), 2 on
usage or configuration errors.  Output files never contain timestamps;
wall-clock information goes to ``runinfo.json`` only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import shutil
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import run_gradcheck
from .checkpoint import CheckpointError, load_bundle
from .config import ConfigError, RunConfig, dump_config, load_config
from .metrics import MetricError, clas_error, feature_stats, fid, ms_ssim
from .nets import ResolutionPlan
from .toydata import DomainSpec, LabelError, ToyDataset, export_dataset, from_uint8, import_dataset, to_uint8
from . import trainer

log = logging.getLogger("biphasic")

EVAL_COLUMNS = ("fid", "ms_ssim", "clas_err", "mi_hat", "n_real", "n_fake")


class UsageError(Exception):
    """Bad arguments discovered after parsing; exits with code 2."""


# -- shared helpers -------------------------------------------------------------


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_runinfo(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    info = {
        "command": command,
        "argv": sys.argv[1:],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "seconds": round(time.time() - started, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "version": __version__,
    }
    info.update(extra or {})
    _write_text(out / "runinfo.json", json.dumps(info, indent=2, sort_keys=True) + "\n")


def _spec_from_meta(meta: dict) -> tuple[DomainSpec, ResolutionPlan]:
    try:
        return DomainSpec.from_dict(meta["spec"]), ResolutionPlan(**meta["plan"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata lacks the domain spec or resolution plan ({exc})") from None


def _generator(path: str) -> tuple[dict, dict]:
    meta, nets = load_bundle(path)
    if "G1" not in nets:
        raise CheckpointError(f"{path} holds no generator (networks: {', '.join(sorted(nets))})")
    return meta, nets


def parse_label(text: str, spec: DomainSpec) -> np.ndarray:
    """``"0 1 0 1 0"``, ``"0,1,0,1,0"`` or attribute names such as ``"blond,makeup"``."""
    tokens = [t for t in text.replace(",", " ").replace("+", " ").split() if t]
    if tokens and all(t in ("0", "1") for t in tokens):
        return spec.validate([float(t) for t in tokens])
    label = np.zeros(spec.label_size)
    for (group, values), sl in zip(spec.groups, spec.group_slices()):
        hits = [v for v in values if v in tokens]
        if len(hits) != 1:
            raise LabelError(f"name exactly one {group} value ({'|'.join(values)}) for {spec.describe()}, got {text!r}")
        label[sl.start + values.index(hits[0])] = 1.0
    for name, i in zip(spec.flags, spec.flag_indices()):
        label[i] = float(name in tokens)
    known = {v for _, vals in spec.groups for v in vals} | set(spec.flags)
    unknown = [t for t in tokens if t not in known]
    if unknown:
        raise LabelError(f"unknown attribute(s) {unknown} for {spec.describe()}")
    return spec.validate(label)


def _read_images(path: Path, hw: int) -> tuple[list[str], np.ndarray]:
    from PIL import Image

    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png") if path.is_dir() else [path]
    if not files:
        raise UsageError(f"no PNG images found in {path}")
    images = []
    for f in files:
        if not f.is_file():
            raise UsageError(f"input image not found: {f}")
        arr = np.asarray(Image.open(f).convert("RGB"))
        if arr.shape[:2] != (hw, hw):
            raise UsageError(f"{f}: expected {hw}x{hw} pixels, got {arr.shape[1]}x{arr.shape[0]}")
        images.append(from_uint8(arr))
    return [f.stem for f in files], np.stack(images)


def _load_data(arg: str, cfg: RunConfig) -> ToyDataset:
    """A dataset directory written by ``export-data``, or a split name regenerated from ``cfg``."""
    if arg in ("train", "test", "external"):
        return getattr(trainer.make_splits(cfg), arg)
    path = Path(arg)
    if not (path / "manifest.csv").is_file():
        raise UsageError(f"{path} is neither a split name nor a dataset directory with manifest.csv")
    return import_dataset(path)


# -- subcommands ------------------------------------------------------------------


def cmd_pretrain(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    splits = trainer.make_splits(cfg)
    est = trainer.pretrain_estimators(splits.external, cfg)
    trainer.save_estimators(est, out, cfg)
    _write_text(out / "config.txt", dump_config(cfg))
    _write_runinfo(out, "pretrain", started)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _config(args.config)
    if args.mode is not None:
        cfg.train.mode = args.mode
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.pretrained is not None:
        cfg.pretrain.dir = args.pretrained
    cfg.validate()
    out = Path(args.out)
    _write_text(out / "config.txt", dump_config(cfg))
    splits = trainer.make_splits(cfg)
    if cfg.pretrain.dir:
        src = Path(cfg.pretrain.dir)
        est = trainer.load_estimators(src)
        if src.resolve() != (out / "pretrain").resolve():
            (out / "pretrain").mkdir(parents=True, exist_ok=True)
            for name in [*trainer.ESTIMATOR_FILES.values(), "pretrain_metrics.csv"]:
                if (src / name).is_file():
                    shutil.copyfile(src / name, out / "pretrain" / name)
    else:
        est = trainer.pretrain_estimators(splits.external, cfg)
        trainer.save_estimators(est, out / "pretrain", cfg)
    try:
        result = trainer.run(cfg, out, estimators=est, splits=splits)
    finally:
        _write_runinfo(out, "train", started, {"mode": cfg.train.mode, "seed": cfg.train.seed})
    final = {k: v for k, v in result.rows[-1].items() if k in ("fid", "ms_ssim", "clas_err", "mi_hat")} if result.rows else {}
    print(f"{cfg.train.mode}: {len(result.checkpoints)} checkpoint(s) in {out / 'checkpoints'}; final " + json.dumps(final))
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    meta, nets = _generator(args.ckpt)
    spec, plan = _spec_from_meta(meta)
    label = parse_label(args.target_label, spec)
    names, images = _read_images(Path(args.input), plan.full_hw)
    labels = np.repeat(label[None], len(images), axis=0)
    fake = trainer.translate(nets, images, labels, alpha=float(meta.get("alpha", 1.0)))
    from PIL import Image

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, src, img in zip(names, images, fake):
        Image.fromarray(to_uint8(img)).save(out / f"{name}.png")
        if args.panel:
            Image.fromarray(np.concatenate([to_uint8(src), to_uint8(img)], axis=1)).save(out / f"{name}_panel.png")
    print(f"wrote {len(fake)} image(s) to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    meta, nets = _generator(args.ckpt)
    spec, plan = _spec_from_meta(meta)
    if "config" in meta:
        from .config import parse_config

        cfg = parse_config(meta["config"], f"{args.ckpt}:config")
    else:
        cfg = RunConfig(domain=spec, plan=plan)
    classifier_path = Path(args.classifier) if args.classifier else Path(args.ckpt).resolve().parent.parent / "pretrain" / "clas.ckpt"
    if not classifier_path.is_file():
        raise CheckpointError(f"classifier checkpoint not found: {classifier_path} (pass --classifier)")
    _, cl = load_bundle(classifier_path)
    if "clas" not in cl or not cl["clas"].frozen:
        raise CheckpointError(f"{classifier_path} does not hold a frozen 'clas' network")
    phi = nets.get("Phi")
    if phi is None:
        raise CheckpointError(f"{args.ckpt} holds no embedder")
    data = _load_data(args.data, cfg)
    if data.spec != spec:
        raise LabelError(f"dataset uses {data.spec.describe()} but the checkpoint expects {spec.describe()}")
    if args.self_compare:
        fake, targets = data.images, data.labels
    else:
        targets = spec.sample_labels(np.random.default_rng([args.seed, 32]), len(data))
        fake = trainer.translate(nets, data.images, targets, alpha=float(meta.get("alpha", 1.0)))
    row = {
        "fid": fid(feature_stats(data.images, phi), feature_stats(fake, phi)),
        "ms_ssim": ms_ssim(data.images, fake),
        "clas_err": clas_error(fake, targets, cl["clas"], spec),
        "mi_hat": trainer.mi_estimate(data.images, fake, phi, min(cfg.train.batch_size, len(fake))),
        "n_real": len(data),
        "n_fake": len(fake),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        w.writerow([trainer._fmt(row[c]) for c in EVAL_COLUMNS])
    print(", ".join(f"{c}={trainer._fmt(row[c])}" for c in EVAL_COLUMNS))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = None if args.ops == "all" else [n.strip() for n in args.ops.split(",") if n.strip()]
    try:
        reports = run_gradcheck(names, trials=args.trials, seed=args.seed)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  max_rel_err={r.max_rel_error:.3e}  trials={r.trials}")
        for failure in r.failures[:3]:
            print(f"    {failure}")
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} cases passed")
    return 1 if failed else 0


def cmd_export_data(args: argparse.Namespace) -> int:
    cfg = _config(args.config)
    splits = trainer.make_splits(cfg)
    chosen = ("train", "test", "external") if args.split == "all" else (args.split,)
    for name in chosen:
        manifest = export_dataset(getattr(splits, name), Path(args.out) / name)
        print(f"{name}: {len(getattr(splits, name))} samples -> {manifest}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biphasic", description="Two-phase image translation on a procedural toy dataset.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train the frozen embedder, warm auxiliaries and evaluation classifier")
    s.add_argument("--config", help="config file (defaults apply when omitted)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train", help="run one training mode end to end")
    s.add_argument("--config")
    s.add_argument("--mode", help="biphasic, single_phase, progressive, ordinary_reg, no_mi or cycle")
    s.add_argument("--seed", type=int)
    s.add_argument("--pretrained", help="directory written by 'pretrain' (overrides pretrain.dir)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="translate PNG images to a target label")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True, help="a PNG file or a directory of PNGs at full resolution")
    s.add_argument("--target-label", required=True, help="'0 1 0 1 0' or names such as 'blond,makeup'")
    s.add_argument("--out", required=True)
    s.add_argument("--panel", action="store_true", help="also write source|output panels")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("eval", help="FID, MS-SSIM, CLAS error and MI estimate for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", default="test", help="'train', 'test', 'external' or an exported dataset directory")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--classifier", help="frozen classifier bundle (default: <run>/pretrain/clas.ckpt)")
    s.add_argument("--seed", type=int, default=0, help="seed for the target labels")
    s.add_argument("--self-compare", action="store_true", help="score the real data against itself")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    s.add_argument("--ops", default="all", help="'all' or a comma-separated list of case names")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("export-data", help="write a dataset split as PNGs plus a manifest")
    s.add_argument("--config")
    s.add_argument("--split", default="all", choices=("train", "test", "external", "all"))
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NotImplementedError as exc:
        print(f"biphasic: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, LabelError, CheckpointError, MetricError, UsageError) as exc:
        print(f"biphasic: error: {exc}", file=sys.stderr)
        return 2
    except trainer.TrainingDiverged as exc:
        print(f"biphasic: training diverged: {exc}; last good state kept in checkpoints/last_good.ckpt", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"biphasic: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
