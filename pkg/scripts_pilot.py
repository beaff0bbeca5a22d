# pilot calibration for the synthetic trend runs (not part of the package)
import copy
import sys
import time

import numpy as np
import torch

from promptmine.data import AugmentationConfig, ShapeSpec, generate_synthetic_dataset, make_split, partition
from promptmine.pipeline import (
    TrainConfig,
    configure_determinism,
    evaluate,
    mine_one_time,
    train_continuous,
    train_one_time,
    train_supervised,
)
from promptmine.student import StudentConfig, build_student
from promptmine.teacher import OracleNoise, OracleTeacher

configure_determinism()

AUG = AugmentationConfig(resize_shortest_side=96, crop_size=96)
SPEC = ShapeSpec()


def setup(seed, labeled_fraction=0.5):
    samples = generate_synthetic_dataset(300, image_size=96, shape_spec=SPEC, seed=777)
    manifest = make_split(samples, labeled_fraction, val_fraction=1 / 6, test_fraction=1 / 6, seed=seed)
    parts = partition(samples, manifest)
    lookup = {s.id: s.mask for s in samples}
    teacher = OracleTeacher(lookup, OracleNoise(boundary_jitter_px=1, prompt_sensitivity=True), seed=seed)
    return parts, teacher, lookup


def cfg(seed, scheduling="supervised_only", prompt_mode="points_box", max_epochs=25, lam=0.25):
    c = TrainConfig(
        base_lr=3e-3,
        max_epochs=max_epochs,
        early_stop_patience=6,
        plateau_patience=3,
        min_lr=1e-5,
        scheduling=scheduling,
        prompt_mode=prompt_mode,
        seed=seed,
    )
    c.loss.lambda_pseudo = lam
    return c


def run_seed(seed):
    t0 = time.time()
    parts, teacher, lookup = setup(seed)
    student = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
    student, rec = train_supervised(student, parts.labeled, parts.val, cfg(seed), augmentation=AUG)
    warm = copy.deepcopy(student.state_dict())
    sup_continue = copy.deepcopy(student)
    res = {}
    res["supervised"] = evaluate(student, parts.test, augmentation=AUG)["dice"]["mean"]
    print(f"  warmup: {len(rec.epochs)} epochs, val dice {rec.epochs[-1].val_dice:.3f}, "
          f"test {res['supervised']:.3f}, {time.time()-t0:.0f}s")

    def fresh():
        s = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
        s.load_state_dict(copy.deepcopy(warm))
        return s

    for mode in ("points_box", "points", "box", "points_box_mask"):
        t1 = time.time()
        s = fresh()
        c = cfg(seed, "continuous", mode, max_epochs=15)
        s, rec2 = train_continuous(s, parts.labeled, parts.unlabeled, teacher, parts.val, c, augmentation=AUG)
        res[f"cont_{mode}"] = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]
        print(f"  cont {mode}: {len(rec2.epochs)} ep, test {res[f'cont_{mode}']:.3f}, {time.time()-t1:.0f}s")

    t1 = time.time()
    s = fresh()
    c = cfg(seed, "one_time", "points_box", max_epochs=15)
    pmap, _ = mine_one_time(s, parts.unlabeled, teacher, c, augmentation=AUG)
    s, rec3 = train_one_time(s, parts.labeled, parts.unlabeled, pmap, parts.val, c, augmentation=AUG)
    res["one_time"] = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]
    print(f"  one_time: {len(pmap)} pseudo, {len(rec3.epochs)} ep, test {res['one_time']:.3f}, {time.time()-t1:.0f}s")

    print(f"  seed {seed} total {time.time()-t0:.0f}s")
    return res


if __name__ == "__main__":
    seeds = [int(a) for a in sys.argv[1:]] or [101]
    allres = {}
    for seed in seeds:
        print(f"seed {seed}")
        allres[seed] = run_seed(seed)
    keys = list(next(iter(allres.values())))
    print("\nmean over seeds:")
    for k in keys:
        vals = [allres[s][k] for s in allres]
        print(f"  {k:18s} {np.mean(vals):.4f}  (each: {['%.3f' % v for v in vals]})")
