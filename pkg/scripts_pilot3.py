# pilot v3 == acceptance dry run: everything at the 50% split, 5 paired seeds
import copy
import sys
import time

import numpy as np

from promptmine.data import AugmentationConfig, generate_synthetic_dataset, make_split, partition
from promptmine.pipeline import (
    TrainConfig, configure_determinism, evaluate, mine_one_time,
    train_continuous, train_one_time, train_supervised,
)
from promptmine.student import StudentConfig, build_student
from promptmine.teacher import OracleNoise, OracleTeacher

configure_determinism()
AUG = AugmentationConfig(resize_shortest_side=96, crop_size=96)


def cfg(seed, mode="points_box", max_epochs=20, warm=False):
    return TrainConfig(
        base_lr=3e-3, max_epochs=30 if warm else max_epochs,
        early_stop_patience=8 if warm else 6,
        plateau_patience=3, min_lr=1e-5, prompt_mode=mode, seed=seed,
    )


def run_seed(seed):
    res = {}
    t0 = time.time()
    samples = generate_synthetic_dataset(300, image_size=96, seed=777)
    manifest = make_split(samples, 0.5, val_fraction=1 / 6, test_fraction=1 / 6, seed=seed)
    parts = partition(samples, manifest)
    lookup = {s.id: s.mask for s in samples}
    teacher = OracleTeacher(lookup, OracleNoise(boundary_jitter_px=1, prompt_sensitivity=True), seed=seed)

    student = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
    student, _ = train_supervised(student, parts.labeled, parts.val, cfg(seed, warm=True), augmentation=AUG)
    warm = copy.deepcopy(student.state_dict())
    res["sup"] = evaluate(student, parts.test, augmentation=AUG)["dice"]["mean"]

    def fresh():
        s = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
        s.load_state_dict(copy.deepcopy(warm))
        return s

    for mode in ("points_box", "points", "box", "points_box_mask"):
        s = fresh()
        c = cfg(seed, mode)
        s, _ = train_continuous(s, parts.labeled, parts.unlabeled, teacher, parts.val, c, augmentation=AUG)
        res[f"cont_{mode}"] = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]

    s = fresh()
    c = cfg(seed)
    pmap, _ = mine_one_time(s, parts.unlabeled, teacher, c, augmentation=AUG)
    s, _ = train_one_time(s, parts.labeled, parts.unlabeled, pmap, parts.val, c, augmentation=AUG)
    res["one_time"] = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]

    print(f"seed {seed}: {time.time()-t0:.0f}s " + " ".join(f"{k}={v:.3f}" for k, v in res.items()), flush=True)
    return res


if __name__ == "__main__":
    seeds = [int(a) for a in sys.argv[1:]] or [101, 102, 103, 104, 105]
    t0 = time.time()
    allres = {s: run_seed(s) for s in seeds}
    keys = list(next(iter(allres.values())))
    print(f"\ntotal {time.time()-t0:.0f}s\nmeans:")
    m = {}
    for k in keys:
        vals = [allres[s][k] for s in allres]
        m[k] = np.mean(vals)
        print(f"  {k:22s} {m[k]:.4f}  ({['%.3f' % v for v in vals]})")
    print("\ncriteria:")
    print(f"  (a) cont - sup      = {m['cont_points_box'] - m['sup']:+.4f}  (need >= +0.01)")
    print(f"  (b) cont - one_time = {m['cont_points_box'] - m['one_time']:+.4f}  (need >= -0.005)")
    print(f"  (c) pb - points     = {m['cont_points_box'] - m['cont_points']:+.4f}  (need >= 0)")
    print(f"      pb - box        = {m['cont_points_box'] - m['cont_box']:+.4f}  (need >= 0)")
    print(f"  (d) pbm - pb        = {m['cont_points_box_mask'] - m['cont_points_box']:+.4f}  (need <= +0.005)")
