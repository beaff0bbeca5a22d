# criterion-7 probe: lambda=0 continuous vs supervised continuation
import copy
import sys
import time

import numpy as np

from promptmine.data import AugmentationConfig, generate_synthetic_dataset, make_split, partition
from promptmine.metrics import LossConfig
from promptmine.pipeline import (
    TrainConfig, configure_determinism, evaluate, train_continuous, train_supervised,
)
from promptmine.student import StudentConfig, build_student
from promptmine.teacher import OracleNoise, OracleTeacher

configure_determinism()
AUG = AugmentationConfig(resize_shortest_side=96, crop_size=96)


def cfg(seed, warm=False, lam=0.25):
    return TrainConfig(
        base_lr=3e-3, max_epochs=30 if warm else 20, early_stop_patience=8 if warm else 6,
        plateau_patience=3, min_lr=1e-5, seed=seed,
        loss=LossConfig(k=0.2, lambda_pseudo=lam),
    )


def run_seed(seed):
    t0 = time.time()
    samples = generate_synthetic_dataset(300, image_size=96, seed=777)
    manifest = make_split(samples, 0.5, val_fraction=1 / 6, test_fraction=1 / 6, seed=seed)
    parts = partition(samples, manifest)
    lookup = {s.id: s.mask for s in samples}
    teacher = OracleTeacher(lookup, OracleNoise(boundary_jitter_px=1, prompt_sensitivity=True), seed=seed)

    student = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
    student, _ = train_supervised(student, parts.labeled, parts.val, cfg(seed, warm=True), augmentation=AUG)
    warm = copy.deepcopy(student.state_dict())

    def fresh():
        s = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
        s.load_state_dict(copy.deepcopy(warm))
        return s

    s = fresh()
    s, _ = train_continuous(s, parts.labeled, parts.unlabeled, teacher, parts.val,
                            cfg(seed, lam=0.0), augmentation=AUG)
    lam0 = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]

    s = fresh()
    s, _ = train_supervised(s, parts.labeled, parts.val, cfg(seed), augmentation=AUG)
    cont = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]
    print(f"seed {seed}: {time.time()-t0:.0f}s lambda0={lam0:.4f} continuation={cont:.4f} diff={lam0-cont:+.4f}",
          flush=True)
    return lam0, cont


if __name__ == "__main__":
    seeds = [int(a) for a in sys.argv[1:]] or [101, 102, 103, 104, 105]
    res = [run_seed(s) for s in seeds]
    lam0 = np.mean([r[0] for r in res])
    cont = np.mean([r[1] for r in res])
    print(f"\nmean lambda0={lam0:.4f} continuation={cont:.4f} |gap|={abs(lam0-cont):.4f} (need < 0.01)")
