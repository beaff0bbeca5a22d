import os

import numpy as np
import pytest

from conftest import brute_dice, flood_fill_components
from promptmine.prompts import PromptSet
from promptmine.teacher import (
    MedSamTeacher,
    OracleNoise,
    OracleTeacher,
    PromptFormatError,
    RemoteTeacher,
    SamTeacher,
    TeacherBatchError,
    TeacherRequest,
    TeacherUnavailableError,
    UnknownSampleError,
    decode_remote_request,
    encode_remote_request,
    serve_teacher,
)


def two_component_gt(h=64, w=64):
    gt = np.zeros((h, w), dtype=np.uint8)
    gt[8:20, 6:22] = 1    # component A (left)
    gt[36:56, 34:58] = 1  # component B (right)
    return gt


def image_for(gt):
    img = np.full((*gt.shape, 3), 0.4, dtype=np.float32)
    img[gt.astype(bool)] = 0.8
    return img


def request(gt, sample_id="s", points=(), box=None, mask_prompt=None, mode=None):
    points = [tuple(p) for p in points]
    if mode is None:
        if points and box is not None:
            mode = "points_box"
        elif box is not None:
            mode = "box"
        else:
            mode = "points"
    if mask_prompt is not None:
        mode = "points_box_mask"
    prompts = PromptSet(
        source_id=sample_id,
        mode=mode,
        points=list(points),
        point_labels=[1] * len(points),
        box=box,
        mask_prompt=mask_prompt,
    )
    return TeacherRequest(image=image_for(gt), prompts=prompts)


def test_zero_noise_box_returns_exact_component():
    gt = np.zeros((32, 32), dtype=np.uint8)
    gt[10:20, 12:25] = 1
    teacher = OracleTeacher({"s": gt}, OracleNoise(), seed=0)
    label = teacher.predict(request(gt, box=(12, 10, 24, 19)))
    assert np.array_equal(label.mask, gt)
    assert label.teacher_confidence == 1.0
    assert label.teacher_id == "oracle"


def test_box_around_one_of_two_components():
    gt = two_component_gt()
    labels, count = flood_fill_components(gt)
    assert count == 2
    teacher = OracleTeacher({"s": gt}, OracleNoise(), seed=0)
    out = teacher.predict(request(gt, box=(4, 6, 24, 22))).mask
    comp_a = (labels == labels[10, 10]).astype(np.uint8)
    assert np.array_equal(out, comp_a)


def test_points_select_containing_component():
    gt = two_component_gt()
    teacher = OracleTeacher({"s": gt}, OracleNoise(), seed=0)
    out = teacher.predict(request(gt, points=[(40, 45)])).mask  # inside B
    labels, _ = flood_fill_components(gt)
    comp_b = (labels == labels[45, 40]).astype(np.uint8)
    assert np.array_equal(out, comp_b)


def test_background_point_falls_back_to_nearest_component():
    gt = two_component_gt()
    teacher = OracleTeacher({"s": gt}, OracleNoise(), seed=0)
    out = teacher.predict(request(gt, points=[(24, 14)])).mask  # just right of A
    labels, _ = flood_fill_components(gt)
    comp_a = (labels == labels[10, 10]).astype(np.uint8)
    assert np.array_equal(out, comp_a)


def test_prompt_sensitive_partial_box_returns_intersection():
    gt = np.zeros((40, 40), dtype=np.uint8)
    gt[10:30, 8:32] = 1
    box = (8, 10, 18, 29)  # left half only, coverage < 0.5
    noise = OracleNoise(prompt_sensitivity=True)
    teacher = OracleTeacher({"s": gt}, noise, seed=0)
    out = teacher.predict(request(gt, box=box)).mask
    expected = np.zeros_like(gt)
    expected[10:30, 8:19] = 1  # gt ∩ box, inclusive coords
    assert np.array_equal(out, expected)


def test_part_ambiguity_truncates_unconfirmed_component():
    gt = np.zeros((40, 40), dtype=np.uint8)
    gt[5:35, 5:35] = 1
    box = (5, 5, 34, 34)
    noise = OracleNoise(prompt_sensitivity=True, part_ambiguity_prob=1.0, part_box_shrink=0.5)
    teacher = OracleTeacher({"s": gt}, noise, seed=0)
    out_box_only = teacher.predict(request(gt, box=box)).mask
    assert out_box_only.sum() < gt.sum()
    assert not np.any(out_box_only & ~gt)
    # a confirming point inside the component suppresses the ambiguity
    out_confirmed = teacher.predict(request(gt, points=[(20, 20)], box=box)).mask
    assert np.array_equal(out_confirmed, gt)


def test_points_without_box_leave_extent_ambiguous():
    gt = np.zeros((40, 40), dtype=np.uint8)
    gt[5:35, 5:35] = 1
    noise = OracleNoise(prompt_sensitivity=True, part_ambiguity_prob=1.0, part_box_shrink=0.5)
    teacher = OracleTeacher({"s": gt}, noise, seed=0)
    out = teacher.predict(request(gt, points=[(20, 20)])).mask
    assert 0 < out.sum() < gt.sum()  # a part, not the whole
    assert not np.any(out & ~gt)
    # without prompt sensitivity the pointed component comes back whole
    plain = OracleTeacher({"s": gt}, OracleNoise(), seed=0)
    assert np.array_equal(plain.predict(request(gt, points=[(20, 20)])).mask, gt)


def test_mask_prompt_acts_as_strict_constraint():
    gt = np.zeros((40, 40), dtype=np.uint8)
    gt[10:30, 10:30] = 1
    # student mask covers only the top part of the object
    mask_prompt = np.zeros((40, 40), dtype=np.float32)
    mask_prompt[10:18, 10:30] = 0.9
    noise = OracleNoise(mask_clip_dilate_px=2)
    teacher = OracleTeacher({"s": gt}, noise, seed=0)
    out = teacher.predict(
        request(gt, points=[(20, 12)], box=(10, 10, 29, 29), mask_prompt=mask_prompt)
    ).mask
    assert out.sum() < gt.sum()
    assert not np.any(out & ~gt)
    assert out[12, 20] == 1  # kept inside the prompt region


def test_jitter_fidelity_bound_on_large_ellipses():
    yy, xx = np.mgrid[0:48, 0:48]
    gt = (((xx - 24) / 14.0) ** 2 + ((yy - 24) / 10.0) ** 2 <= 1.0).astype(np.uint8)
    assert gt.sum() >= 200
    noise = OracleNoise(boundary_jitter_px=1)
    for seed in range(8):
        teacher = OracleTeacher({"s": gt}, noise, seed=seed)
        out = teacher.predict(request(gt, box=(0, 0, 47, 47))).mask
        assert brute_dice(gt, out) >= 0.8


def test_component_drop_probability_one_empties_mask():
    gt = two_component_gt()
    teacher = OracleTeacher({"s": gt}, OracleNoise(component_drop_prob=1.0), seed=0)
    out = teacher.predict(request(gt, box=(0, 0, 63, 63))).mask
    assert out.sum() == 0


def test_oracle_determinism_bit_identical():
    gt = two_component_gt()
    noise = OracleNoise(boundary_jitter_px=2, component_drop_prob=0.3, prompt_sensitivity=True)
    req = request(gt, points=[(10, 10)], box=(4, 4, 60, 60))
    a = OracleTeacher({"s": gt}, noise, seed=5).predict(req)
    b = OracleTeacher({"s": gt}, noise, seed=5).predict(req)
    assert np.array_equal(a.mask, b.mask)
    assert a.teacher_confidence == b.teacher_confidence
    c = OracleTeacher({"s": gt}, noise, seed=6).predict(req)
    assert not np.array_equal(a.mask, c.mask) or a.teacher_confidence != c.teacher_confidence


def test_oracle_unknown_sample():
    teacher = OracleTeacher({"s": two_component_gt()}, seed=0)
    with pytest.raises(UnknownSampleError):
        teacher.predict(request(two_component_gt(), sample_id="other", points=[(1, 1)]))


def test_oracle_checksum_invariant_across_predictions():
    gt = two_component_gt()
    teacher = OracleTeacher({"s": gt}, OracleNoise(boundary_jitter_px=1), seed=0)
    before = teacher.state_checksum()
    for i in range(5):
        teacher.predict(request(gt, points=[(10 + i, 10)], box=(0, 0, 63, 63)))
    assert teacher.state_checksum() == before
    other = OracleTeacher({"s": gt}, OracleNoise(boundary_jitter_px=2), seed=0)
    assert other.state_checksum() != before


def test_predict_batch_contract():
    gt = two_component_gt()
    teacher = OracleTeacher({"s": gt}, seed=0)
    assert teacher.predict_batch([]) == []
    req = request(gt, box=(4, 6, 24, 22))
    single = teacher.predict_batch([req])
    assert len(single) == 1
    assert np.array_equal(single[0].mask, teacher.predict(req).mask)

    reqs = [
        request(gt, box=(4, 6, 24, 22)),
        request(gt, box=(30, 30, 60, 60)),
        request(gt, box=(0, 0, 63, 63)),
    ]
    order_a = teacher.predict_batch(reqs)
    order_b = teacher.predict_batch(list(reversed(reqs)))
    for x, y in zip(order_a, reversed(order_b)):
        assert np.array_equal(x.mask, y.mask)


def test_predict_batch_partial_failure():
    gt = two_component_gt()
    teacher = OracleTeacher({"s": gt}, seed=0)
    good = request(gt, box=(4, 6, 24, 22))
    bad = request(gt, sample_id="missing", points=[(1, 1)])
    with pytest.raises(TeacherBatchError) as exc:
        teacher.predict_batch([good, bad, good])
    err = exc.value
    assert list(err.errors) == [1]
    assert err.results[0] is not None and err.results[2] is not None
    assert err.results[1] is None


def test_request_validates_prompt_bounds():
    gt = two_component_gt()
    with pytest.raises(PromptFormatError, match="point"):
        request(gt, points=[(99, 1)])
    with pytest.raises(PromptFormatError, match="box"):
        request(gt, box=(0, 0, 64, 10))


def test_sam_adapter_unavailable_without_weights(tmp_path):
    with pytest.raises(TeacherUnavailableError):
        SamTeacher(str(tmp_path / "missing.pth"))
    with pytest.raises(TeacherUnavailableError):
        MedSamTeacher(str(tmp_path / "missing.pth"))


_SAM_WEIGHTS = os.environ.get("PROMPTMINE_SAM_WEIGHTS")


@pytest.mark.skipif(not _SAM_WEIGHTS, reason="set PROMPTMINE_SAM_WEIGHTS to run the SAM adapter check")
def test_sam_adapter_box_prompt_sanity_envelope():
    # property check, not fixed pixels: with a valid box prompt the predicted
    # foreground stays inside a 10%-dilated box
    from scipy import ndimage

    model_type = os.environ.get("PROMPTMINE_SAM_MODEL_TYPE", "vit_h")
    teacher = SamTeacher(_SAM_WEIGHTS, model_type=model_type)
    rng = np.random.default_rng(0)
    image = rng.random((160, 160, 3)).astype(np.float32) * 0.3
    image[40:120, 50:130] += 0.6
    image = np.clip(image, 0.0, 1.0)
    box = (50, 40, 129, 119)
    prompts = PromptSet(source_id="sam-check", mode="box", points=[], point_labels=[], box=box)
    label = teacher.predict(TeacherRequest(image=image, prompts=prompts))
    assert set(np.unique(label.mask)) <= {0, 1}
    assert label.mask.shape == image.shape[:2]
    c0, r0, c1, r1 = box
    pad_c = int(0.1 * (c1 - c0 + 1))
    pad_r = int(0.1 * (r1 - r0 + 1))
    envelope = np.zeros_like(label.mask, dtype=bool)
    envelope[max(r0 - pad_r, 0) : r1 + pad_r + 1, max(c0 - pad_c, 0) : c1 + pad_c + 1] = True
    assert not np.any(label.mask.astype(bool) & ~envelope)
    assert ndimage.label(label.mask)[1] >= 1  # found something


# ---------------------------------------------------------------- remote mode


def test_remote_wire_format_round_trip():
    gt = two_component_gt()
    req = request(gt, sample_id="abc", points=[(10, 10)], box=(4, 6, 24, 22))
    body = encode_remote_request(req)
    assert set(body) == {"image_b64", "points", "box", "sample_id"}
    assert body["points"] == [[10, 10]] and body["box"] == [4, 6, 24, 22]
    decoded = decode_remote_request(body)
    assert decoded.prompts.source_id == "abc"
    assert decoded.prompts.points == [(10, 10)]
    assert decoded.prompts.box == (4, 6, 24, 22)
    assert np.allclose(decoded.image, req.image, atol=1 / 255 + 1e-6)


def test_remote_rejects_mask_prompt():
    gt = two_component_gt()
    req = request(gt, box=(4, 6, 24, 22), mask_prompt=np.zeros((64, 64), dtype=np.float32))
    with pytest.raises(PromptFormatError, match="mask"):
        encode_remote_request(req)


def test_remote_teacher_over_http():
    gt = two_component_gt()
    oracle = OracleTeacher({"s": gt}, OracleNoise(boundary_jitter_px=1), seed=3)
    server, url = serve_teacher(oracle)
    try:
        remote = RemoteTeacher(url)
        req = request(gt, points=[(10, 10)], box=(4, 6, 24, 22))
        via_http = remote.predict(req)
        direct = oracle.predict(req)
        assert np.array_equal(via_http.mask, direct.mask)
        assert via_http.teacher_confidence == pytest.approx(direct.teacher_confidence)
        assert remote.state_checksum() == oracle.state_checksum()
    finally:
        server.shutdown()


def test_remote_teacher_error_propagation():
    gt = two_component_gt()
    oracle = OracleTeacher({"s": gt}, seed=0)
    server, url = serve_teacher(oracle)
    try:
        remote = RemoteTeacher(url)
        req = request(gt, sample_id="unknown", points=[(5, 5)])
        with pytest.raises(Exception, match="400|unknown|no ground truth"):
            remote.predict(req)
    finally:
        server.shutdown()


def test_remote_teacher_unreachable():
    remote = RemoteTeacher("http://127.0.0.1:9", timeout=0.5)
    gt = two_component_gt()
    with pytest.raises(TeacherUnavailableError):
        remote.predict(request(gt, points=[(5, 5)]))
