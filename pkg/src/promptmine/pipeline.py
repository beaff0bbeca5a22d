"""Training orchestration for the three phases.

Phase 1 trains the student on labeled data only. Phase 2 adds pseudo
labels mined from the frozen teacher, either generated once from the
warm-started student (one_time) or regenerated from the live student every
time an unlabeled sample is visited (continuous). All randomness flows
through named streams keyed by (seed, purpose, epoch, sample id), so paired
runs, resumes, and the empty-unlabeled degenerate case are reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import rle
from .data import AugmentationConfig, ImageSample, augment
from .metrics import (
    BatchComposition,
    LossConfig,
    aggregate,
    bce_loss,
    combined_loss,
    dice_loss,
    dice_score,
    iou_score,
)
from .prompts import PROMPT_MODES, ProbabilityMask, build_prompt_set
from .seeding import rng_for
from .student import save_checkpoint
from .teacher import PseudoLabel, Teacher, TeacherBatchError, TeacherRequest

log = logging.getLogger(__name__)

SCHEDULING_MODES = ("supervised_only", "one_time", "continuous")
PSEUDO_MAP_VERSION = 1


@dataclass
class TrainConfig:
    """Optimizer, schedule, and mining knobs (paper training protocol defaults)."""

    base_lr: float = 5e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 8
    max_epochs: int = 100
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-7
    early_stop_patience: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    prompt_mode: str = "points_box"
    point_count: int = 3
    scheduling: str = "supervised_only"
    pseudo_refresh: str = "per_visit"  # fixed: continuous mode refreshes per visit
    seed: int = 0
    reinit_before_pseudo: bool = False

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        # base_lr == 0 is allowed as a degenerate frozen-model setting for tests
        if self.base_lr > 0 and not 0 < self.min_lr < self.base_lr:
            raise ValueError("need 0 < min_lr < base_lr")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.scheduling not in SCHEDULING_MODES:
            raise ValueError(f"unknown scheduling {self.scheduling!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.pseudo_refresh != "per_visit":
            raise ValueError("only per-visit pseudo refresh is supported")
        if self.point_count < 1:
            raise ValueError("point_count must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    sup_loss: float
    pseudo_loss: float
    val_loss: float
    val_dice: float
    val_iou: float
    lr: float
    pseudo_used: int = 0
    pseudo_rejected: int = 0
    teacher_failures: int = 0

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    """Everything one training run produced, minus the weights."""

    phase: str
    epochs: List[EpochRecord] = field(default_factory=list)
    audit: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    final_test: Optional[dict] = None
    teacher_checksum_before: Optional[str] = None
    teacher_checksum_after: Optional[str] = None

    def summary(self) -> dict:
        consults = sum(e.pseudo_used + e.teacher_failures for e in self.epochs)
        failures = sum(e.teacher_failures for e in self.epochs)
        return {
            "phase": self.phase,
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "final_val_dice": self.epochs[-1].val_dice if self.epochs else None,
            "final_val_iou": self.epochs[-1].val_iou if self.epochs else None,
            "teacher_failure_rate": failures / consults if consults else 0.0,
            "teacher_checksum_before": self.teacher_checksum_before,
            "teacher_checksum_after": self.teacher_checksum_after,
            "final_test": self.final_test,
        }

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "epochs.jsonl", "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
        with open(out_dir / "audit.jsonl", "w") as fh:
            for entry in self.audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        (out_dir / "summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        )


def configure_determinism() -> None:
    """Single-threaded torch so repeated runs are bit-identical on CPU."""
    torch.set_num_threads(1)


def _eval_config(aug: AugmentationConfig) -> AugmentationConfig:
    return dataclasses.replace(aug, enabled=False)


def canonicalize(sample: ImageSample, aug: AugmentationConfig) -> ImageSample:
    """Deterministic geometry normalization (resize + center crop only)."""
    return augment(sample, _eval_config(aug))


def _image_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    arr = np.stack([s.image.transpose(2, 0, 1) for s in samples])
    return torch.from_numpy(arr)


def _mask_tensor(mask: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask)).float()


def _supervised_pairs(probs: torch.Tensor, samples: Sequence[ImageSample]):
    return [(probs[i, 0], _mask_tensor(s.mask)) for i, s in enumerate(samples)]


def _cycled(ids: Sequence[str], perm: np.ndarray, start: int, count: int) -> List[str]:
    n = len(ids)
    return [ids[perm[(start + i) % n]] for i in range(count)]


@dataclass
class _LoopState:
    epoch: int = 0
    lr: float = 0.0
    best_val: float = math.inf
    best_epoch: int = 0
    bad_plateau: int = 0
    bad_early: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class _TrainLoop:
    """Shared engine: batching, schedule, early stopping, checkpoints."""

    def __init__(
        self,
        student,
        labeled: Sequence[ImageSample],
        val: Sequence[ImageSample],
        config: TrainConfig,
        augmentation: AugmentationConfig,
        phase: str,
        out_dir: Optional[Path] = None,
        batch_hook: Optional[Callable[[dict], None]] = None,
        resume_payload: Optional[dict] = None,
    ):
        if not labeled:
            raise ValueError("labeled set is empty")
        if not val:
            raise ValueError("validation set is empty")
        self.student = student
        self.labeled = list(labeled)
        self.labeled_ids = [s.id for s in self.labeled]
        self.by_id = {s.id: s for s in self.labeled}
        self.val = [canonicalize(s, augmentation) for s in val]
        self.config = config
        self.aug = augmentation
        self.phase = phase
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.batch_hook = batch_hook
        self.record = RunRecord(phase=phase)

        self.optimizer = torch.optim.Adam(
            student.parameters(),
            lr=config.base_lr,
            betas=config.betas,
            weight_decay=config.weight_decay,
        )
        self.state = _LoopState(lr=config.base_lr)
        self.best_state = self._clone_weights()
        if resume_payload is not None:
            trainer_state = resume_payload.get("trainer_state") or {}
            loop = trainer_state.get("loop")
            if loop:
                self.state = _LoopState(**loop)
            if resume_payload.get("optimizer_state") is not None:
                self.optimizer.load_state_dict(resume_payload["optimizer_state"])
            best = trainer_state.get("best_model_state")
            if best is not None:
                self.best_state = best
            self._set_lr(self.state.lr)

    def _clone_weights(self):
        return {k: v.detach().clone() for k, v in self.student.state_dict().items()}

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _augment_labeled(self, sample_id: str, epoch: int) -> ImageSample:
        rng = rng_for(self.config.seed, "augment", epoch, sample_id)
        return augment(self.by_id[sample_id], self.aug, rng)

    def _validate(self) -> Tuple[float, float, float]:
        self.student.eval()
        losses, dices, ious = [], [], []
        bs = self.config.batch_size
        with torch.no_grad():
            for i in range(0, len(self.val), bs):
                chunk = self.val[i : i + bs]
                probs = self.student(_image_tensor(chunk))
                for j, s in enumerate(chunk):
                    p = probs[j, 0]
                    g = _mask_tensor(s.mask)
                    loss = dice_loss(p, g, self.config.loss.dice_smooth) + self.config.loss.k * bce_loss(p, g)
                    losses.append(float(loss.detach()))
                    pred = (p.numpy() >= 0.5).astype(np.uint8)
                    dices.append(dice_score(s.mask, pred))
                    ious.append(iou_score(s.mask, pred))
        self.student.train()
        return float(np.mean(losses)), float(np.mean(dices)), float(np.mean(ious))

    def _save_last(self) -> None:
        if self.out_dir is None:
            return
        trainer_state = {"loop": self.state.to_dict(), "best_model_state": self.best_state}
        save_checkpoint(
            self.student,
            self.out_dir / "checkpoints" / "last.pt",
            epoch=self.state.epoch,
            optimizer=self.optimizer,
            trainer_state=trainer_state,
        )

    def run(self, epoch_fn: Callable[[int], dict]) -> RunRecord:
        """Drive epochs until convergence; epoch_fn does the gradient steps."""
        self.student.train()
        while self.state.epoch < self.config.max_epochs:
            epoch = self.state.epoch
            lr_used = self.state.lr
            stats = epoch_fn(epoch)
            val_loss, val_dice, val_iou = self._validate()
            self.record.epochs.append(
                EpochRecord(
                    epoch=epoch,
                    train_loss=stats["train_loss"],
                    sup_loss=stats["sup_loss"],
                    pseudo_loss=stats["pseudo_loss"],
                    val_loss=val_loss,
                    val_dice=val_dice,
                    val_iou=val_iou,
                    lr=lr_used,
                    pseudo_used=stats.get("pseudo_used", 0),
                    pseudo_rejected=stats.get("pseudo_rejected", 0),
                    teacher_failures=stats.get("teacher_failures", 0),
                )
            )
            self.state.epoch = epoch + 1

            if val_loss < self.state.best_val:
                self.state.best_val = val_loss
                self.state.best_epoch = epoch
                self.state.bad_plateau = 0
                self.state.bad_early = 0
                self.best_state = self._clone_weights()
            else:
                self.state.bad_plateau += 1
                self.state.bad_early += 1
                if self.state.bad_plateau >= self.config.plateau_patience:
                    self.state.lr = max(self.state.lr * self.config.plateau_factor, self.config.min_lr)
                    self._set_lr(self.state.lr)
                    self.state.bad_plateau = 0
            self._save_last()
            if self.state.bad_early >= self.config.early_stop_patience:
                self.record.stopped_early = True
                break

        self.student.load_state_dict(self.best_state)
        self.record.best_epoch = self.state.best_epoch
        self.record.best_val_loss = self.state.best_val
        if self.out_dir is not None:
            save_checkpoint(self.student, self.out_dir / "checkpoints" / "best.pt", epoch=self.state.best_epoch)
            self.record.save(self.out_dir)
        return self.record


def _supervised_epoch(loop: _TrainLoop, epoch: int) -> dict:
    cfg = loop.config
    n = len(loop.labeled_ids)
    bs = min(cfg.batch_size, n)
    steps = math.ceil(n / bs)
    perm = rng_for(cfg.seed, "shuffle", "labeled", epoch).permutation(n)
    losses = []
    for step in range(steps):
        ids = _cycled(loop.labeled_ids, perm, step * bs, bs)
        batch = [loop._augment_labeled(i, epoch) for i in ids]
        loop.optimizer.zero_grad()
        probs = loop.student(_image_tensor(batch))
        pairs = _supervised_pairs(probs, batch)
        loss = combined_loss(pairs, [], cfg.loss)
        loss.backward()
        loop.optimizer.step()
        losses.append(float(loss.detach()))
        if loop.batch_hook is not None:
            loop.batch_hook(
                {
                    "epoch": epoch,
                    "step": step,
                    "labeled": [(p.detach().clone(), g.clone()) for p, g in pairs],
                    "pseudo": [],
                    "loss": float(loss.detach()),
                }
            )
    mean = float(np.mean(losses))
    return {"train_loss": mean, "sup_loss": mean, "pseudo_loss": 0.0}


def train_supervised(
    student,
    labeled: Sequence[ImageSample],
    val: Sequence[ImageSample],
    config: TrainConfig,
    augmentation: Optional[AugmentationConfig] = None,
    out_dir: Optional[Path] = None,
    batch_hook: Optional[Callable[[dict], None]] = None,
    resume_payload: Optional[dict] = None,
) -> Tuple[object, RunRecord]:
    """Phase 1: optimize the supervised loss until the val loss converges."""
    aug = augmentation or AugmentationConfig()
    loop = _TrainLoop(
        student, labeled, val, config, aug, "supervised",
        out_dir=out_dir, batch_hook=batch_hook, resume_payload=resume_payload,
    )
    record = loop.run(lambda epoch: _supervised_epoch(loop, epoch))
    return student, record


def _audit_entry(
    sample_id: str,
    pass_index: int,
    prompt_dict: Optional[dict],
    accepted: bool,
    reason: Optional[str],
    pseudo_mask: Optional[np.ndarray],
    audit_reference: Optional[Dict[str, np.ndarray]],
) -> dict:
    entry = {
        "sample_id": sample_id,
        "pass_index": pass_index,
        "prompt": prompt_dict,
        "accepted": accepted,
        "reason": reason,
        "pseudo_dice_gt": None,
    }
    # analysis only: never flows back into training targets
    if audit_reference is not None and pseudo_mask is not None and sample_id in audit_reference:
        entry["pseudo_dice_gt"] = dice_score(audit_reference[sample_id], pseudo_mask)
    return entry


def _consult_teacher(
    teacher: Teacher,
    requests: List[TeacherRequest],
) -> Tuple[List[Optional[PseudoLabel]], Dict[int, Exception]]:
    if not requests:
        return [], {}
    try:
        results = teacher.predict_batch(requests)
        return list(results), {}
    except TeacherBatchError as exc:
        return exc.results, exc.errors


def mine_one_time(
    student,
    unlabeled: Sequence[ImageSample],
    teacher: Teacher,
    config: TrainConfig,
    augmentation: Optional[AugmentationConfig] = None,
    out_dir: Optional[Path] = None,
    audit_reference: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[Dict[str, PseudoLabel], List[dict]]:
    """Generate pseudo labels once from the warm-started student.

    Samples whose prompts are degenerate (nothing reaches the box threshold)
    or whose teacher call fails are omitted from the map and logged.
    """
    aug = augmentation or AugmentationConfig()
    canon = [canonicalize(s, aug) for s in unlabeled]
    student.eval()
    pseudo_map: Dict[str, PseudoLabel] = {}
    audit: List[dict] = []
    bs = config.batch_size
    with torch.no_grad():
        for i in range(0, len(canon), bs):
            chunk = canon[i : i + bs]
            probs = student(_image_tensor(chunk))
            requests, owners = [], []
            for j, s in enumerate(chunk):
                pmask = ProbabilityMask(probs[j, 0].numpy(), s.id)
                prompt = build_prompt_set(
                    pmask,
                    mode=config.prompt_mode,
                    x=config.point_count,
                    rng=rng_for(config.seed, "tie", "mine", s.id),
                    mask_prompt_size=teacher.mask_prompt_size(),
                )
                if prompt is None:
                    audit.append(_audit_entry(s.id, 0, None, False, "rejected_degenerate", None, audit_reference))
                    continue
                requests.append(TeacherRequest(image=s.image, prompts=prompt))
                owners.append((s, prompt))
            results, errors = _consult_teacher(teacher, requests)
            for k, ((s, prompt), label) in enumerate(zip(owners, results)):
                if label is None:
                    log.warning("teacher failed on %s: %s", s.id, errors.get(k))
                    audit.append(
                        _audit_entry(s.id, 0, prompt.to_json_dict(), False, "teacher_error", None, audit_reference)
                    )
                    continue
                label = dataclasses.replace(label, generated_at=0)
                pseudo_map[s.id] = label
                audit.append(
                    _audit_entry(s.id, 0, prompt.to_json_dict(), True, None, label.mask, audit_reference)
                )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_pseudo_labels(pseudo_map, out_dir / "pseudo_labels.json")
        with open(out_dir / "audit_mine.jsonl", "w") as fh:
            for entry in audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return pseudo_map, audit


def save_pseudo_labels(pseudo_map: Dict[str, PseudoLabel], path: Path) -> None:
    doc = {
        "version": PSEUDO_MAP_VERSION,
        "entries": {
            sid: {
                "mask_rle": rle.encode_mask(label.mask),
                "confidence": label.teacher_confidence,
                "generated_at": label.generated_at,
                "teacher_id": label.teacher_id,
            }
            for sid, label in sorted(pseudo_map.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_pseudo_labels(path: Path) -> Dict[str, PseudoLabel]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != PSEUDO_MAP_VERSION:
        raise ValueError(f"unsupported pseudo label file version {doc.get('version')!r}")
    out = {}
    for sid, entry in doc["entries"].items():
        out[sid] = PseudoLabel(
            mask=rle.decode_mask(entry["mask_rle"]),
            teacher_confidence=entry.get("confidence"),
            generated_at=int(entry.get("generated_at", 0)),
            teacher_id=entry.get("teacher_id", ""),
        )
    return out


def train_one_time(
    student,
    labeled: Sequence[ImageSample],
    unlabeled: Sequence[ImageSample],
    pseudo_map: Dict[str, PseudoLabel],
    val: Sequence[ImageSample],
    config: TrainConfig,
    augmentation: Optional[AugmentationConfig] = None,
    out_dir: Optional[Path] = None,
    batch_hook: Optional[Callable[[dict], None]] = None,
    resume_payload: Optional[dict] = None,
) -> Tuple[object, RunRecord]:
    """Phase 2, one-time scheduling: train on ground truth plus fixed pseudo labels."""
    aug = augmentation or AugmentationConfig()
    if not pseudo_map:
        log.warning("pseudo map empty; degrading to supervised training")
        loop = _TrainLoop(student, labeled, val, config, aug, "one_time",
                          out_dir=out_dir, batch_hook=batch_hook, resume_payload=resume_payload)
        record = loop.run(lambda epoch: _supervised_epoch(loop, epoch))
        return student, record

    canon_by_id = {s.id: canonicalize(s, aug) for s in unlabeled}
    missing = sorted(set(pseudo_map) - set(canon_by_id))
    if missing:
        raise ValueError(f"pseudo map references unknown unlabeled ids: {missing[:8]}")
    pseudo_samples = {
        sid: ImageSample(id=sid, image=canon_by_id[sid].image, mask=pseudo_map[sid].mask, source="pseudo")
        for sid in sorted(pseudo_map)
    }
    pseudo_ids = sorted(pseudo_samples)

    loop = _TrainLoop(student, labeled, val, config, aug, "one_time",
                      out_dir=out_dir, batch_hook=batch_hook, resume_payload=resume_payload)
    comp = BatchComposition.proportional(len(labeled), len(pseudo_ids), config.batch_size)

    def epoch_fn(epoch: int) -> dict:
        n_l, n_p = len(loop.labeled_ids), len(pseudo_ids)
        steps = max(math.ceil(n_l / comp.labeled), math.ceil(n_p / comp.pseudo))
        perm_l = rng_for(config.seed, "shuffle", "labeled", epoch).permutation(n_l)
        perm_p = rng_for(config.seed, "shuffle", "unlabeled", epoch).permutation(n_p)
        totals, sups, pseudos = [], [], []
        for step in range(steps):
            l_ids = _cycled(loop.labeled_ids, perm_l, step * comp.labeled, comp.labeled)
            p_ids = _cycled(pseudo_ids, perm_p, step * comp.pseudo, comp.pseudo)
            l_batch = [loop._augment_labeled(i, epoch) for i in l_ids]
            p_batch = [
                augment(pseudo_samples[i], aug, rng_for(config.seed, "augment", epoch, i)) for i in p_ids
            ]
            loop.optimizer.zero_grad()
            l_probs = loop.student(_image_tensor(l_batch))
            p_probs = loop.student(_image_tensor(p_batch))
            l_pairs = _supervised_pairs(l_probs, l_batch)
            p_pairs = _supervised_pairs(p_probs, p_batch)
            loss = combined_loss(l_pairs, p_pairs, config.loss)
            loss.backward()
            loop.optimizer.step()
            totals.append(float(loss.detach()))
            sups.append(float(combined_loss(l_pairs, [], config.loss).detach()))
            pseudos.append(float(combined_loss([], p_pairs, config.loss).detach()))
            if batch_hook is not None:
                batch_hook(
                    {
                        "epoch": epoch,
                        "step": step,
                        "labeled": [(p.detach().clone(), g.clone()) for p, g in l_pairs],
                        "pseudo": [(p.detach().clone(), g.clone()) for p, g in p_pairs],
                        "loss": float(loss.detach()),
                    }
                )
        return {
            "train_loss": float(np.mean(totals)),
            "sup_loss": float(np.mean(sups)),
            "pseudo_loss": float(np.mean(pseudos)),
            "pseudo_used": steps * comp.pseudo,
        }

    record = loop.run(epoch_fn)
    return student, record


def train_continuous(
    student,
    labeled: Sequence[ImageSample],
    unlabeled: Sequence[ImageSample],
    teacher: Teacher,
    val: Sequence[ImageSample],
    config: TrainConfig,
    augmentation: Optional[AugmentationConfig] = None,
    out_dir: Optional[Path] = None,
    batch_hook: Optional[Callable[[dict], None]] = None,
    audit_reference: Optional[Dict[str, np.ndarray]] = None,
    resume_payload: Optional[dict] = None,
) -> Tuple[object, RunRecord]:
    """Phase 2, continuous scheduling: fresh pseudo label per unlabeled visit.

    Each batch forwards its unlabeled samples through the live student, turns
    the predictions into prompts, consults the teacher, and compares the same
    predictions against the returned pseudo labels. With an empty unlabeled
    set the trajectory is identical to continued supervised training.
    """
    aug = augmentation or AugmentationConfig()
    loop = _TrainLoop(student, labeled, val, config, aug, "continuous",
                      out_dir=out_dir, batch_hook=batch_hook, resume_payload=resume_payload)
    loop.record.teacher_checksum_before = teacher.state_checksum()

    canon_unlabeled = [canonicalize(s, aug) for s in unlabeled]
    unlabeled_ids = [s.id for s in canon_unlabeled]
    canon_by_id = dict(zip(unlabeled_ids, canon_unlabeled))

    if not unlabeled:
        record = loop.run(lambda epoch: _supervised_epoch(loop, epoch))
        record.teacher_checksum_after = teacher.state_checksum()
        return student, record

    comp = BatchComposition.proportional(len(labeled), len(unlabeled), config.batch_size)

    def epoch_fn(epoch: int) -> dict:
        n_l, n_u = len(loop.labeled_ids), len(unlabeled_ids)
        steps = max(math.ceil(n_l / comp.labeled), math.ceil(n_u / comp.pseudo))
        perm_l = rng_for(config.seed, "shuffle", "labeled", epoch).permutation(n_l)
        perm_u = rng_for(config.seed, "shuffle", "unlabeled", epoch).permutation(n_u)
        totals, sups, pseudos = [], [], []
        used = rejected = failures = 0
        for step in range(steps):
            l_ids = _cycled(loop.labeled_ids, perm_l, step * comp.labeled, comp.labeled)
            u_ids = _cycled(unlabeled_ids, perm_u, step * comp.pseudo, comp.pseudo)
            l_batch = [loop._augment_labeled(i, epoch) for i in l_ids]
            u_batch = [canon_by_id[i] for i in u_ids]

            loop.optimizer.zero_grad()
            l_probs = loop.student(_image_tensor(l_batch))
            u_probs = loop.student(_image_tensor(u_batch))
            l_pairs = _supervised_pairs(l_probs, l_batch)

            requests, owners = [], []
            for j, s in enumerate(u_batch):
                pmask = ProbabilityMask(u_probs[j, 0].detach().numpy(), s.id)
                prompt = build_prompt_set(
                    pmask,
                    mode=config.prompt_mode,
                    x=config.point_count,
                    rng=rng_for(config.seed, "tie", epoch, s.id),
                    mask_prompt_size=teacher.mask_prompt_size(),
                )
                if prompt is None:
                    rejected += 1
                    loop.record.audit.append(
                        _audit_entry(s.id, epoch, None, False, "rejected_degenerate", None, audit_reference)
                    )
                    continue
                requests.append(TeacherRequest(image=s.image, prompts=prompt))
                owners.append((j, s, prompt))
            results, errors = _consult_teacher(teacher, requests)
            p_pairs = []
            for k, ((j, s, prompt), label) in enumerate(zip(owners, results)):
                if label is None:
                    failures += 1
                    log.warning("teacher failed on %s: %s", s.id, errors.get(k))
                    loop.record.audit.append(
                        _audit_entry(s.id, epoch, prompt.to_json_dict(), False, "teacher_error", None, audit_reference)
                    )
                    continue
                used += 1
                label = dataclasses.replace(label, generated_at=epoch)
                p_pairs.append((u_probs[j, 0], _mask_tensor(label.mask)))
                loop.record.audit.append(
                    _audit_entry(s.id, epoch, prompt.to_json_dict(), True, None, label.mask, audit_reference)
                )

            loss = combined_loss(l_pairs, p_pairs, config.loss)
            loss.backward()
            loop.optimizer.step()
            totals.append(float(loss.detach()))
            sups.append(float(combined_loss(l_pairs, [], config.loss).detach()))
            pseudos.append(float(combined_loss([], p_pairs, config.loss).detach()) if p_pairs else 0.0)
            if batch_hook is not None:
                batch_hook(
                    {
                        "epoch": epoch,
                        "step": step,
                        "labeled": [(p.detach().clone(), g.clone()) for p, g in l_pairs],
                        "pseudo": [(p.detach().clone(), g.clone()) for p, g in p_pairs],
                        "loss": float(loss.detach()),
                    }
                )
        return {
            "train_loss": float(np.mean(totals)),
            "sup_loss": float(np.mean(sups)),
            "pseudo_loss": float(np.mean(pseudos)),
            "pseudo_used": used,
            "pseudo_rejected": rejected,
            "teacher_failures": failures,
        }

    record = loop.run(epoch_fn)
    record.teacher_checksum_after = teacher.state_checksum()
    return student, record


def evaluate(
    student,
    test: Sequence[ImageSample],
    teacher: Optional[Teacher] = None,
    refine: bool = False,
    config: Optional[TrainConfig] = None,
    augmentation: Optional[AugmentationConfig] = None,
) -> dict:
    """Metric report on held-out data.

    With ``refine`` on, the student's prediction is converted to prompts and
    the teacher's mask is scored instead (accuracy over efficiency); samples
    with degenerate prompts or teacher failures fall back to the student
    mask and are counted.
    """
    if refine and teacher is None:
        raise ValueError("refine=True requires a teacher")
    cfg = config or TrainConfig()
    aug = augmentation or AugmentationConfig()
    canon = [canonicalize(s, aug) for s in test]
    student.eval()
    rows = []
    fallbacks = 0
    bs = cfg.batch_size
    with torch.no_grad():
        for i in range(0, len(canon), bs):
            chunk = canon[i : i + bs]
            probs = student(_image_tensor(chunk))
            for j, s in enumerate(chunk):
                pred = (probs[j, 0].numpy() >= 0.5).astype(np.uint8)
                if refine:
                    pmask = ProbabilityMask(probs[j, 0].numpy(), s.id)
                    prompt = build_prompt_set(
                        pmask,
                        mode=cfg.prompt_mode,
                        x=cfg.point_count,
                        rng=rng_for(cfg.seed, "tie", "eval", s.id),
                        mask_prompt_size=teacher.mask_prompt_size(),
                    )
                    if prompt is None:
                        fallbacks += 1
                    else:
                        try:
                            label = teacher.predict(TeacherRequest(image=s.image, prompts=prompt))
                            pred = label.mask
                        except Exception as exc:  # teacher failure: score the student mask
                            log.warning("refine failed on %s: %s", s.id, exc)
                            fallbacks += 1
                rows.append(
                    {
                        "sample_id": s.id,
                        "dice": dice_score(s.mask, pred),
                        "iou": iou_score(s.mask, pred),
                    }
                )
    return {
        "rows": rows,
        "dice": aggregate([r["dice"] for r in rows]),
        "iou": aggregate([r["iou"] for r in rows]),
        "n": len(rows),
        "refined": bool(refine),
        "refine_fallbacks": fallbacks,
    }
