# pilot v2: (a)/(b) at the 50% split, prompt-mode ablation at 75% (as in the paper)
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


def cfg(seed, mode="points_box", max_epochs=25, warm=False):
    return TrainConfig(
        base_lr=3e-3, max_epochs=max_epochs, early_stop_patience=8 if warm else 6,
        plateau_patience=3, min_lr=1e-5, prompt_mode=mode, seed=seed,
    )


def world(seed, frac):
    samples = generate_synthetic_dataset(300, image_size=96, seed=777)
    manifest = make_split(samples, frac, val_fraction=1 / 6, test_fraction=1 / 6, seed=seed)
    parts = partition(samples, manifest)
    lookup = {s.id: s.mask for s in samples}
    teacher = OracleTeacher(lookup, OracleNoise(boundary_jitter_px=1, prompt_sensitivity=True), seed=seed)
    return parts, teacher


def warmup(parts, seed):
    student = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
    _, rec = train_supervised(student, parts.labeled, parts.val, cfg(seed, max_epochs=30, warm=True), augmentation=AUG)
    return student, rec


def run_seed(seed):
    res = {}
    t0 = time.time()

    # --- 50% split: scheduling comparison
    parts, teacher = world(seed, 0.5)
    student, _ = warmup(parts, seed)
    warm = copy.deepcopy(student.state_dict())
    res["sup_50"] = evaluate(student, parts.test, augmentation=AUG)["dice"]["mean"]

    def fresh(w=warm):
        s = build_student(StudentConfig(architecture="tiny_ed"), seed=seed)
        s.load_state_dict(copy.deepcopy(w))
        return s

    s = fresh()
    c = cfg(seed, "points_box", 20)
    s, _ = train_continuous(s, parts.labeled, parts.unlabeled, teacher, parts.val, c, augmentation=AUG)
    res["cont_50"] = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]

    s = fresh()
    pmap, _ = mine_one_time(s, parts.unlabeled, teacher, c, augmentation=AUG)
    s, _ = train_one_time(s, parts.labeled, parts.unlabeled, pmap, parts.val, c, augmentation=AUG)
    res["ot_50"] = evaluate(s, parts.test, augmentation=AUG)["dice"]["mean"]

    # --- 75% split: prompt-mode ablation
    parts75, teacher75 = world(seed, 0.75)
    student75, _ = warmup(parts75, seed)
    warm75 = copy.deepcopy(student75.state_dict())
    res["sup_75"] = evaluate(student75, parts75.test, augmentation=AUG)["dice"]["mean"]
    for mode in ("points_box", "points", "box", "points_box_mask"):
        s = fresh(warm75)
        c = cfg(seed, mode, 20)
        s, _ = train_continuous(s, parts75.labeled, parts75.unlabeled, teacher75, parts75.val, c, augmentation=AUG)
        res[f"abl_{mode}"] = evaluate(s, parts75.test, augmentation=AUG)["dice"]["mean"]

    print(f"seed {seed}: {time.time()-t0:.0f}s " + " ".join(f"{k}={v:.3f}" for k, v in res.items()))
    return res


if __name__ == "__main__":
    seeds = [int(a) for a in sys.argv[1:]] or [101, 102, 103, 104, 105]
    allres = {s: run_seed(s) for s in seeds}
    keys = list(next(iter(allres.values())))
    print("\nmeans:")
    for k in keys:
        vals = [allres[s][k] for s in allres]
        print(f"  {k:22s} {np.mean(vals):.4f}  ({['%.3f' % v for v in vals]})")
    m = {k: np.mean([allres[s][k] for s in allres]) for k in keys}
    print("\ncriteria:")
    print(f"  (a) cont50 - sup50 = {m['cont_50'] - m['sup_50']:+.4f}  (need >= +0.01)")
    print(f"  (b) cont50 - ot50  = {m['cont_50'] - m['ot_50']:+.4f}  (need >= -0.005)")
    print(f"  (c) pb - points    = {m['abl_points_box'] - m['abl_points']:+.4f}  (need >= 0)")
    print(f"      pb - box       = {m['abl_points_box'] - m['abl_box']:+.4f}  (need >= 0)")
    print(f"  (d) pbm - pb       = {m['abl_points_box_mask'] - m['abl_points_box']:+.4f}  (need <= +0.005)")
