"""Command-line surface: split, train, mine, evaluate, report.

One invocation runs one experiment against one output directory (lock-file
enforced). Config is a nested YAML document mirroring the dataclasses in
this package; any key can be overridden through environment variables with
the ``PROMPTMINE_`` prefix, e.g. ``PROMPTMINE_TEACHER__WEIGHTS_PATH=/w.pth``.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from .data import (
    AugmentationConfig,
    DATASET_LAYOUTS,
    ImageSample,
    SplitManifest,
    generate_synthetic_dataset,
    load_dataset,
    make_split,
    partition,
    presplit_from_sources,
)
from .metrics import aggregate
from .pipeline import (
    RunRecord,
    TrainConfig,
    configure_determinism,
    evaluate,
    mine_one_time,
    train_continuous,
    train_one_time,
    train_supervised,
)
from .student import StudentConfig, build_student, load_checkpoint
from .teacher import (
    MedSamTeacher,
    OracleNoise,
    OracleTeacher,
    RemoteTeacher,
    SamTeacher,
    Teacher,
)

log = logging.getLogger(__name__)

ENV_PREFIX = "PROMPTMINE_"


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n: int = 300
    image_size: int = 96


@dataclass
class DatasetConfig:
    layout: str = "synthetic"  # dataset layouts plus "synthetic"
    root: Optional[str] = None
    labeled_fraction: float = 0.75
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class TeacherConfig:
    backend: str = "oracle"  # {oracle, sam, medsam, remote}
    weights_path: Optional[str] = None
    endpoint_url: Optional[str] = None
    model_type: str = "vit_h"
    device: str = "cpu"
    multimask: bool = True
    use_points: bool = False
    seed: int = 0
    noise: OracleNoise = field(default_factory=OracleNoise)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    output_dir: str = "runs/experiment"


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _build(dc_type, doc: dict):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"expected a mapping for {dc_type.__name__}, got {type(doc).__name__}")
    kwargs = {}
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {dc_type.__name__}: {sorted(unknown)}")
    for name in known:
        if name not in doc:
            continue
        value = doc[name]
        # YAML has no tuples; every tuple-typed field here accepts a list
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{dc_type.__name__}: {exc}") from exc


_NESTED = {
    "dataset": DatasetConfig,
    "student": StudentConfig,
    "teacher": TeacherConfig,
    "train": TrainConfig,
    "augmentation": AugmentationConfig,
}


def config_to_dict(config: ExperimentConfig) -> dict:
    return _plain(config)


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = set(doc) - set(_NESTED) - {"output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, dc_type in _NESTED.items():
        sub = dict(doc.get(key) or {})
        if key == "dataset" and "synthetic" in sub:
            sub["synthetic"] = _build(SyntheticConfig, sub["synthetic"])
        if key == "teacher" and "noise" in sub:
            sub["noise"] = _build(OracleNoise, sub["noise"])
        if key == "train" and "loss" in sub:
            from .metrics import LossConfig

            sub["loss"] = _build(LossConfig, sub["loss"])
        kwargs[key] = _build(dc_type, sub)
    kwargs["output_dir"] = doc.get("output_dir", "runs/experiment")
    return ExperimentConfig(**kwargs)


def _apply_env_overrides(doc: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {'.'.join(path)}: {part} is not a mapping")
        node[path[-1]] = value
        log.info("env override %s = %r", ".".join(path), value)
    return doc


def load_config(path: Path, environ=None) -> ExperimentConfig:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a mapping")
    doc = _apply_env_overrides(doc, environ)
    return config_from_dict(doc)


def save_config(config: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))


def validate_config(config: ExperimentConfig) -> None:
    d = config.dataset
    if d.layout not in DATASET_LAYOUTS + ("synthetic",):
        raise ConfigError(f"dataset.layout: unknown layout {d.layout!r}")
    if not 0.0 < d.labeled_fraction <= 1.0:
        raise ConfigError(f"dataset.labeled_fraction: must be in (0, 1], got {d.labeled_fraction}")
    for name in ("val_fraction", "test_fraction"):
        v = getattr(d, name)
        if not 0.0 < v < 1.0:
            raise ConfigError(f"dataset.{name}: must be in (0, 1), got {v}")
    if d.val_fraction + d.test_fraction >= 1.0:
        raise ConfigError("dataset.val_fraction + dataset.test_fraction must be < 1")
    if d.layout == "synthetic":
        if d.synthetic.n < 3:
            raise ConfigError("dataset.synthetic.n: need at least 3 samples")
    else:
        if not d.root:
            raise ConfigError("dataset.root: required for on-disk layouts")
        if not Path(d.root).is_dir():
            raise ConfigError(f"dataset.root: {d.root} does not exist")
    t = config.teacher
    if t.backend not in ("oracle", "sam", "medsam", "remote"):
        raise ConfigError(f"teacher.backend: unknown backend {t.backend!r}")
    if t.backend in ("sam", "medsam") and not t.weights_path:
        raise ConfigError("teacher.weights_path: required for sam/medsam backends")
    if t.backend == "remote" and not t.endpoint_url:
        raise ConfigError("teacher.endpoint_url: required for the remote backend")


def _load_samples(config: ExperimentConfig) -> List[ImageSample]:
    d = config.dataset
    if d.layout == "synthetic":
        return generate_synthetic_dataset(d.synthetic.n, image_size=d.synthetic.image_size, seed=d.seed)
    return load_dataset(Path(d.root), d.layout)


def build_teacher(config: ExperimentConfig, ground_truth_lookup: Optional[Dict[str, np.ndarray]] = None) -> Teacher:
    t = config.teacher
    if t.backend == "oracle":
        if not ground_truth_lookup:
            raise ConfigError("oracle teacher needs ground-truth masks from the dataset")
        return OracleTeacher(ground_truth_lookup, noise=t.noise, seed=t.seed)
    if t.backend == "sam":
        return SamTeacher(t.weights_path, model_type=t.model_type, device=t.device, multimask=t.multimask)
    if t.backend == "medsam":
        return MedSamTeacher(t.weights_path, device=t.device, use_points=t.use_points)
    return RemoteTeacher(t.endpoint_url)


@contextlib.contextmanager
def _output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"{out_dir} is locked by another invocation ({lock} exists); "
            "concurrent runs must target distinct output dirs"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _manifest_path(out_dir: Path) -> Path:
    return out_dir / "manifest.json"


def _manifest_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _make_manifest(config: ExperimentConfig, samples: List[ImageSample]) -> SplitManifest:
    d = config.dataset
    presplit = presplit_from_sources(samples) if d.layout == "covid_qu_ex" else None
    return make_split(
        samples,
        labeled_fraction=d.labeled_fraction,
        val_fraction=d.val_fraction,
        test_fraction=d.test_fraction,
        seed=d.seed,
        presplit=presplit,
    )


def cmd_split(config: ExperimentConfig, force: bool = False) -> Path:
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = _manifest_path(out_dir)
    if path.exists() and not force:
        raise RuntimeError(f"{path} already exists; pass --force to overwrite")
    samples = _load_samples(config)
    manifest = _make_manifest(config, samples)
    manifest.save(path)
    print(
        "labeled/unlabeled/val/test: "
        f"{len(manifest.labeled_ids)}/{len(manifest.unlabeled_ids)}"
        f"/{len(manifest.val_ids)}/{len(manifest.test_ids)}"
    )
    print(f"manifest written to {path}")
    return path


def _phase_dir(config: ExperimentConfig, phase: str) -> Path:
    return Path(config.output_dir) / phase


def _warm_student(config: ExperimentConfig, warmup: bool, world) -> object:
    """Load the supervised best checkpoint, or train it inline with --warmup."""
    best = _phase_dir(config, "supervised") / "checkpoints" / "best.pt"
    if not best.exists():
        if not warmup:
            raise RuntimeError(
                f"no warm-start checkpoint at {best}; run `train --phase supervised` first "
                "or pass --warmup"
            )
        _run_phase(config, "supervised", world)
    student, _ = load_checkpoint(best, expected_architecture=config.student.architecture)
    return student


def _finalize_run(config: ExperimentConfig, phase: str, record: RunRecord, report: dict, manifest_hash: str) -> None:
    run_dir = _phase_dir(config, phase)
    record.final_test = report
    record.save(run_dir)
    save_config(config, run_dir / "config.yaml")
    summary = record.summary()
    summary.update(
        {
            "method": phase if phase == "supervised" else f"{phase}/{config.train.prompt_mode}",
            "prompt_mode": config.train.prompt_mode,
            "labeled_fraction": config.dataset.labeled_fraction,
            "seed": config.train.seed,
            "manifest_sha256": manifest_hash,
        }
    )
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"[{phase}] epochs={summary['epochs_run']} best_val={summary['best_val_loss']:.4f} "
        f"test dice={report['dice']['mean']:.4f} iou={report['iou']['mean']:.4f}"
    )


class _World:
    """Samples, partitions, and the hidden ground-truth lookup for oracles."""

    def __init__(self, config: ExperimentConfig):
        manifest_file = _manifest_path(Path(config.output_dir))
        if not manifest_file.exists():
            raise RuntimeError(f"no manifest at {manifest_file}; run `promptmine split` first")
        self.samples = _load_samples(config)
        self.manifest = SplitManifest.load(manifest_file)
        self.manifest_hash = _manifest_hash(manifest_file)
        self.parts = partition(self.samples, self.manifest)
        self.lookup = {s.id: s.mask for s in self.samples if s.mask is not None}

    def audit_reference(self) -> Dict[str, np.ndarray]:
        return {s.id: self.lookup[s.id] for s in self.parts.unlabeled if s.id in self.lookup}


def _run_phase(config: ExperimentConfig, phase: str, world: _World, warmup: bool = False) -> None:
    run_dir = _phase_dir(config, phase)
    aug = config.augmentation
    train_cfg = dataclasses.replace(config.train, scheduling={"supervised": "supervised_only"}.get(phase, phase))

    if phase == "supervised":
        student = build_student(config.student, seed=config.train.seed)
        student, record = train_supervised(
            student, world.parts.labeled, world.parts.val, train_cfg, augmentation=aug, out_dir=run_dir
        )
    else:
        student = _warm_student(config, warmup, world)
        teacher = build_teacher(config, world.lookup)
        audit_ref = world.audit_reference() if config.teacher.backend == "oracle" else None
        if phase == "one_time":
            pseudo_map, mine_audit = mine_one_time(
                student, world.parts.unlabeled, teacher, train_cfg,
                augmentation=aug, out_dir=run_dir, audit_reference=audit_ref,
            )
            if train_cfg.reinit_before_pseudo:
                # mining used the warm student; training restarts from scratch
                student = build_student(config.student, seed=config.train.seed)
            student, record = train_one_time(
                student, world.parts.labeled, world.parts.unlabeled, pseudo_map,
                world.parts.val, train_cfg, augmentation=aug, out_dir=run_dir,
            )
            record.audit = mine_audit + record.audit
            record.teacher_checksum_before = record.teacher_checksum_after = teacher.state_checksum()
        else:
            if train_cfg.reinit_before_pseudo:
                student = build_student(config.student, seed=config.train.seed)
            student, record = train_continuous(
                student, world.parts.labeled, world.parts.unlabeled, teacher,
                world.parts.val, train_cfg, augmentation=aug, out_dir=run_dir,
                audit_reference=audit_ref,
            )

    report = evaluate(student, world.parts.test, config=train_cfg, augmentation=aug)
    _finalize_run(config, phase, record, report, world.manifest_hash)


def cmd_train(config: ExperimentConfig, phase: str, warmup: bool = False) -> Path:
    world = _World(config)
    _run_phase(config, phase, world, warmup=warmup)
    return _phase_dir(config, phase)


def cmd_mine(config: ExperimentConfig) -> Path:
    world = _World(config)
    student = _warm_student(config, warmup=False, world=world)
    teacher = build_teacher(config, world.lookup)
    out = _phase_dir(config, "mine")
    pseudo_map, audit = mine_one_time(
        student, world.parts.unlabeled, teacher, config.train,
        augmentation=config.augmentation, out_dir=out,
        audit_reference=world.audit_reference() if config.teacher.backend == "oracle" else None,
    )
    rejected = sum(1 for a in audit if not a["accepted"])
    print(f"mined {len(pseudo_map)} pseudo labels ({rejected} rejected) into {out}")
    return out


def cmd_evaluate(config: ExperimentConfig, checkpoint: Optional[str], refine: bool = False) -> dict:
    world = _World(config)
    ck = Path(checkpoint) if checkpoint else _phase_dir(config, "supervised") / "checkpoints" / "best.pt"
    student, _ = load_checkpoint(ck, expected_architecture=config.student.architecture)
    teacher = build_teacher(config, world.lookup) if refine else None
    report = evaluate(
        student, world.parts.test, teacher=teacher, refine=refine,
        config=config.train, augmentation=config.augmentation,
    )
    out = Path(config.output_dir) / ("evaluation_refined.json" if refine else "evaluation.json")
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(
        f"test dice={report['dice']['mean']:.4f}±{report['dice']['std']:.4f} "
        f"iou={report['iou']['mean']:.4f}±{report['iou']['std']:.4f} "
        f"(n={report['n']}, refined={report['refined']})"
    )
    return report


def _load_summary(run_dir: Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise RuntimeError(f"{run_dir} holds no summary.json")
    doc = json.loads(path.read_text())
    needed = {"method", "labeled_fraction", "final_test"}
    if not needed <= set(doc) or not doc.get("final_test"):
        raise RuntimeError(f"{path} is not a finished run summary")
    return doc


def cmd_report(run_dirs: List[str], csv_path: Optional[str] = None) -> str:
    """Aggregate run summaries into a per-split comparison table."""
    summaries = [_load_summary(Path(d)) for d in run_dirs]
    groups: Dict[tuple, List[dict]] = {}
    for doc in summaries:
        groups.setdefault((doc["labeled_fraction"], doc["method"]), []).append(doc)

    lines = []
    csv_rows = ["split,method,iou_mean,iou_std,dice_mean,dice_std,runs,single_run"]
    for split in sorted({k[0] for k in groups}, reverse=True):
        lines.append(f"== Labeled/Unlabeled Split ({split:.0%} Labeled) ==")
        header = f"{'METHOD':40s}  {'IOU (AVG±STD)':16s}  {'DICE (AVG±STD)':16s}  RUNS"
        lines.append(header)
        for (frac, method), docs in sorted(groups.items()):
            if frac != split:
                continue
            iou = aggregate([d["final_test"]["iou"]["mean"] for d in docs])
            dice = aggregate([d["final_test"]["dice"]["mean"] for d in docs])
            single = "*" if iou["n"] == 1 else " "
            lines.append(
                f"{method:40s}  {iou['mean']:.3f} ± {iou['std']:.3f}   "
                f"{dice['mean']:.3f} ± {dice['std']:.3f}   {iou['n']}{single}"
            )
            csv_rows.append(
                f"{split},{method},{iou['mean']:.6f},{iou['std']:.6f},"
                f"{dice['mean']:.6f},{dice['std']:.6f},{iou['n']},{iou['n'] == 1}"
            )
        lines.append("")
    lines.append("* single run: std is 0.000 by construction")
    table = "\n".join(lines)
    print(table)
    if csv_path:
        Path(csv_path).write_text("\n".join(csv_rows) + "\n")
        print(f"csv written to {csv_path}")
    return table


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptmine", description=__doc__)
    parser.add_argument("--config", type=str, help="path to the experiment YAML")
    parser.add_argument("--seed", type=int, help="override dataset/train/teacher seeds")
    parser.add_argument("--output-dir", type=str, help="override output directory")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("split", help="create and persist the split manifest")
    p_train = sub.add_parser("train", help="run a training phase")
    p_train.add_argument("--phase", required=True, choices=("supervised", "one_time", "continuous"))
    p_train.add_argument("--warmup", action="store_true", help="run the supervised phase inline if missing")
    sub.add_parser("mine", help="mine one-time pseudo labels from the warm student")
    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", type=str, default=None)
    p_eval.add_argument("--refine", action="store_true", help="score teacher masks prompted by the student")
    p_report = sub.add_parser("report", help="aggregate run directories into a table")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--csv", type=str, default=None)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    config = load_config(Path(args.config))
    if args.seed is not None:
        config.dataset.seed = args.seed
        config.train = dataclasses.replace(config.train, seed=args.seed)
        config.teacher.seed = args.seed
    if args.output_dir:
        config.output_dir = args.output_dir
    validate_config(config)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    configure_determinism()
    try:
        if args.command == "report":
            cmd_report(args.run_dirs, csv_path=args.csv)
            return 0
        config = _resolve_config(args)
        if args.command == "split":
            cmd_split(config, force=args.force)
            return 0
        with _output_lock(Path(config.output_dir)):
            if args.command == "train":
                cmd_train(config, phase=args.phase, warmup=args.warmup)
            elif args.command == "mine":
                cmd_mine(config)
            elif args.command == "evaluate":
                cmd_evaluate(config, checkpoint=args.checkpoint, refine=args.refine)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
