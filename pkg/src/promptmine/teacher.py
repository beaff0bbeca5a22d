"""Frozen promptable-teacher contract and its implementations.

A teacher maps (image, prompts) to a binary mask and is never trained.
Three backends are provided:

* ``OracleTeacher`` - deterministic stand-in that answers from a hidden
  ground-truth lookup with configurable noise, so the whole pipeline can be
  exercised on a laptop with no model weights.
* ``SamTeacher`` / ``MedSamTeacher`` - adapters over the ``segment_anything``
  package; they differ in weights and in MedSAM's box-only prompt
  convention.
* ``RemoteTeacher`` - client for a teacher served over HTTP, with
  ``serve_teacher`` as the matching server loop.
"""

from __future__ import annotations

import abc
import base64
import hashlib
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .metrics import dice_score
from .prompts import PromptSet
from .rle import decode_mask, encode_mask
from .seeding import rng_for

_EIGHT_CONN = np.ones((3, 3), dtype=bool)


class TeacherError(Exception):
    pass


class TeacherUnavailableError(TeacherError):
    """Backend cannot run: missing weights, package, or endpoint."""


class PromptFormatError(TeacherError):
    pass


class UnknownSampleError(TeacherError):
    pass


class TeacherBatchError(TeacherError):
    """Raised by predict_batch when some elements fail.

    ``results`` holds a PseudoLabel or None per input position; ``errors``
    maps failing positions to their exceptions.
    """

    def __init__(self, results: List[Optional["PseudoLabel"]], errors: Dict[int, Exception]):
        self.results = results
        self.errors = errors
        super().__init__(f"{len(errors)} of {len(results)} teacher requests failed")


@dataclass
class TeacherRequest:
    image: np.ndarray
    prompts: PromptSet

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for c, r in self.prompts.points:
            if not (0 <= c < w and 0 <= r < h):
                raise PromptFormatError(f"point ({c}, {r}) outside {w} x {h} image")
        if self.prompts.box is not None:
            c0, r0, c1, r1 = self.prompts.box
            if not (0 <= c0 <= c1 < w and 0 <= r0 <= r1 < h):
                raise PromptFormatError(f"box {self.prompts.box} outside {w} x {h} image")


@dataclass
class PseudoLabel:
    """Teacher-produced binary mask with provenance metadata."""

    mask: np.ndarray
    teacher_confidence: Optional[float] = None
    generated_at: int = 0
    teacher_id: str = ""


class Teacher(abc.ABC):
    """A frozen promptable segmentation model."""

    teacher_id: str = "teacher"
    #: False means callers must serialize predict() calls.
    concurrent_safe: bool = False

    @abc.abstractmethod
    def predict(self, request: TeacherRequest) -> PseudoLabel:
        """Binary mask at the request image's resolution; never mutates state."""

    def predict_batch(self, requests: Sequence[TeacherRequest]) -> List[PseudoLabel]:
        """Element-wise predict, order preserved; partial failures collected."""
        results: List[Optional[PseudoLabel]] = []
        errors: Dict[int, Exception] = {}
        for i, req in enumerate(requests):
            try:
                results.append(self.predict(req))
            except TeacherError as exc:
                results.append(None)
                errors[i] = exc
        if errors:
            raise TeacherBatchError(results, errors)
        return [r for r in results if r is not None]

    @abc.abstractmethod
    def state_checksum(self) -> str:
        """Digest of all teacher parameters/state; must be call-invariant."""

    def mask_prompt_size(self) -> Optional[int]:
        """Expected square resolution of mask prompts; None = image resolution."""
        return None


@dataclass
class OracleNoise:
    """Noise model for the oracle teacher.

    ``prompt_sensitivity`` enables the whole/part/subpart behavior. A box
    covering less than half a component always yields only the intersected
    part. Beyond that, extent stays ambiguous unless the prompts pin it
    down: with probability ``part_ambiguity_prob`` a component is truncated
    to the centrally shrunken prompt box when no guiding point confirms it,
    and, without any box, to its own shrunken bounding box even when
    pointed at (points mark the object but not its extent). A mask prompt
    always acts as a strict spatial constraint: output is clipped to the
    dilated thresholded prompt.
    """

    boundary_jitter_px: int = 0
    component_drop_prob: float = 0.0
    prompt_sensitivity: bool = False
    part_ambiguity_prob: float = 0.4
    part_box_shrink: float = 0.6
    mask_clip_dilate_px: int = 2


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (xx**2 + yy**2) <= radius**2


def _box_mask(shape, box) -> np.ndarray:
    c0, r0, c1, r1 = box
    m = np.zeros(shape, dtype=bool)
    m[r0 : r1 + 1, c0 : c1 + 1] = True
    return m


def _shrunk_box(box, factor: float):
    c0, r0, c1, r1 = box
    cx, cy = (c0 + c1) / 2.0, (r0 + r1) / 2.0
    hw, hh = (c1 - c0) / 2.0 * factor, (r1 - r0) / 2.0 * factor
    return (
        int(round(cx - hw)),
        int(round(cy - hh)),
        int(round(cx + hw)),
        int(round(cy + hh)),
    )


def _prompt_digest(prompts: PromptSet) -> int:
    h = hashlib.sha256()
    h.update(repr((prompts.mode, prompts.points, prompts.box)).encode())
    if prompts.mask_prompt is not None:
        h.update(np.ascontiguousarray(prompts.mask_prompt, dtype=np.float32).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


class OracleTeacher(Teacher):
    """Answers prompts from a hidden ground-truth lookup.

    Selection rule: the ground-truth connected components intersecting the
    prompt box, or, without a box, the components containing a guiding
    point (nearest component as fallback). Noise is applied per component;
    see OracleNoise. Output is a pure function of (seed, request), so
    repeated identical requests are bit-identical regardless of call order.
    """

    teacher_id = "oracle"
    concurrent_safe = True

    def __init__(
        self,
        ground_truth_lookup: Mapping[str, np.ndarray],
        noise: Optional[OracleNoise] = None,
        seed: int = 0,
    ):
        self._lookup = {k: np.asarray(v).astype(bool) for k, v in ground_truth_lookup.items()}
        self.noise = noise or OracleNoise()
        self.seed = seed

    def predict(self, request: TeacherRequest) -> PseudoLabel:
        prompts = request.prompts
        gt = self._lookup.get(prompts.source_id)
        if gt is None:
            raise UnknownSampleError(f"no ground truth for sample {prompts.source_id!r}")
        if gt.shape != request.image.shape[:2]:
            raise PromptFormatError(
                f"image shape {request.image.shape[:2]} != ground truth shape {gt.shape}"
            )

        labels, n_comp = ndimage.label(gt, structure=_EIGHT_CONN)
        rng = rng_for(self.seed, "oracle", prompts.source_id, _prompt_digest(prompts))
        selected = self._select_components(labels, n_comp, prompts)

        noise = self.noise
        ideal = np.isin(labels, selected) if selected else np.zeros_like(gt)
        out = np.zeros_like(gt, dtype=bool)
        box_region = _box_mask(gt.shape, prompts.box) if prompts.box is not None else None
        for comp_id in selected:
            comp = labels == comp_id
            if noise.component_drop_prob > 0 and rng.random() < noise.component_drop_prob:
                continue
            comp = self._apply_prompt_sensitivity(comp, prompts, box_region, rng)
            if noise.boundary_jitter_px > 0:
                amount = int(rng.integers(-noise.boundary_jitter_px, noise.boundary_jitter_px + 1))
                if amount > 0:
                    comp = ndimage.binary_dilation(comp, structure=_disk(amount))
                elif amount < 0:
                    comp = ndimage.binary_erosion(comp, structure=_disk(-amount))
            out |= comp

        if prompts.mask_prompt is not None:
            out &= self._mask_constraint(prompts.mask_prompt, gt.shape)

        confidence = dice_score(ideal.astype(np.uint8), out.astype(np.uint8))
        return PseudoLabel(
            mask=out.astype(np.uint8),
            teacher_confidence=confidence,
            teacher_id=self.teacher_id,
        )

    def _select_components(self, labels, n_comp, prompts: PromptSet) -> List[int]:
        if n_comp == 0:
            return []
        if prompts.box is not None:
            region = _box_mask(labels.shape, prompts.box)
            return sorted(set(np.unique(labels[region])) - {0})
        hits = {int(labels[r, c]) for c, r in prompts.points} - {0}
        if hits:
            return sorted(hits)
        if not prompts.points:
            return []
        # no point lands on foreground: fall back to the nearest component
        c, r = prompts.points[0]
        best, best_d2 = None, None
        for comp_id in range(1, n_comp + 1):
            rows, cols = np.nonzero(labels == comp_id)
            d2 = ((rows - r) ** 2 + (cols - c) ** 2).min()
            if best_d2 is None or d2 < best_d2:
                best, best_d2 = comp_id, d2
        return [best]

    def _clip_to_shrunk_box(self, comp, box) -> np.ndarray:
        shrunk = _shrunk_box(box, self.noise.part_box_shrink)
        c0, r0 = max(shrunk[0], 0), max(shrunk[1], 0)
        c1 = min(shrunk[2], comp.shape[1] - 1)
        r1 = min(shrunk[3], comp.shape[0] - 1)
        if c1 < c0 or r1 < r0:
            return np.zeros_like(comp)
        return comp & _box_mask(comp.shape, (c0, r0, c1, r1))

    def _apply_prompt_sensitivity(self, comp, prompts: PromptSet, box_region, rng) -> np.ndarray:
        if not self.noise.prompt_sensitivity:
            return comp
        if box_region is None:
            # no box: extent is underspecified even for pointed components
            if rng.random() < self.noise.part_ambiguity_prob:
                rows, cols = np.nonzero(comp)
                own_box = (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))
                return self._clip_to_shrunk_box(comp, own_box)
            return comp
        coverage = np.logical_and(comp, box_region).sum() / comp.sum()
        if coverage < 0.5:
            return comp & box_region
        confirmed = any(comp[r, c] for c, r in prompts.points)
        if not confirmed and rng.random() < self.noise.part_ambiguity_prob:
            return self._clip_to_shrunk_box(comp, prompts.box)
        return comp

    def _mask_constraint(self, mask_prompt: np.ndarray, shape) -> np.ndarray:
        prompt = np.asarray(mask_prompt, dtype=np.float32)
        if prompt.shape != shape:
            prompt = cv2.resize(prompt, (shape[1], shape[0]), interpolation=cv2.INTER_LINEAR)
        region = prompt >= 0.5
        if self.noise.mask_clip_dilate_px > 0 and region.any():
            region = ndimage.binary_dilation(region, structure=_disk(self.noise.mask_clip_dilate_px))
        return region

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.seed, self.noise)).encode())
        for key in sorted(self._lookup):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self._lookup[key]).tobytes())
        return h.hexdigest()


def _probs_to_logits(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs.astype(np.float32), 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


class SamTeacher(Teacher):
    """Adapter over the ``segment_anything`` predictor.

    The backbone is frozen at load time. With a box prompt a single mask is
    requested (the box resolves whole/part ambiguity); otherwise all
    candidates are generated and the highest-scoring one kept. The
    predictor resizes internally and returns masks at the input resolution.
    """

    teacher_id = "sam"
    concurrent_safe = False  # predictor caches per-image embeddings

    def __init__(
        self,
        weights_path: str,
        model_type: str = "vit_h",
        device: str = "cpu",
        multimask: bool = True,
    ):
        try:
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise TeacherUnavailableError("segment-anything is not installed") from exc
        if not Path(weights_path).exists():
            raise TeacherUnavailableError(f"weights not found at {weights_path}")
        model = sam_model_registry[model_type](checkpoint=str(weights_path))
        model.to(device)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self._predictor = SamPredictor(model)
        self.multimask = multimask

    def _prompt_arrays(self, prompts: PromptSet):
        points = labels = None
        if prompts.points:
            points = np.array(prompts.points, dtype=np.float64)
            labels = np.array(prompts.point_labels, dtype=np.int64)
        box = None if prompts.box is None else np.array(prompts.box, dtype=np.float64)
        mask_input = None
        if prompts.mask_prompt is not None:
            low = prompts.mask_prompt
            size = self.mask_prompt_size()
            if low.shape != (size, size):
                low = cv2.resize(low.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
            mask_input = _probs_to_logits(low)[None, :, :]
        return points, labels, box, mask_input

    def predict(self, request: TeacherRequest) -> PseudoLabel:
        image8 = np.clip(request.image * 255.0, 0, 255).round().astype(np.uint8)
        self._predictor.set_image(image8)
        points, labels, box, mask_input = self._prompt_arrays(request.prompts)
        multimask = self.multimask and box is None
        masks, scores, _ = self._predictor.predict(
            point_coords=points,
            point_labels=labels,
            box=box,
            mask_input=mask_input,
            multimask_output=multimask,
        )
        best = int(np.argmax(scores))
        return PseudoLabel(
            mask=masks[best].astype(np.uint8),
            teacher_confidence=float(scores[best]),
            teacher_id=self.teacher_id,
        )

    def mask_prompt_size(self) -> Optional[int]:
        return 256

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        state = self._model.state_dict()
        for key in sorted(state):
            h.update(key.encode())
            h.update(state[key].detach().cpu().numpy().tobytes())
        return h.hexdigest()


class MedSamTeacher(SamTeacher):
    """MedSAM weights behind the same contract.

    MedSAM was fine-tuned with box prompts, so the adapter prefers the box
    and drops guiding points by default.
    """

    teacher_id = "medsam"

    def __init__(self, weights_path: str, device: str = "cpu", use_points: bool = False):
        super().__init__(weights_path, model_type="vit_b", device=device, multimask=False)
        self.use_points = use_points

    def predict(self, request: TeacherRequest) -> PseudoLabel:
        prompts = request.prompts
        if prompts.box is not None and not self.use_points and prompts.points:
            prompts = PromptSet(
                source_id=prompts.source_id,
                mode="box",
                points=[],
                point_labels=[],
                box=prompts.box,
                mask_prompt=prompts.mask_prompt,
            )
            request = TeacherRequest(image=request.image, prompts=prompts)
        label = super().predict(request)
        label.teacher_id = self.teacher_id
        return label


def encode_remote_request(request: TeacherRequest) -> dict:
    """JSON body for the remote teacher wire format."""
    if request.prompts.mask_prompt is not None:
        raise PromptFormatError("remote teacher wire format does not carry mask prompts")
    image8 = np.clip(request.image * 255.0, 0, 255).round().astype(np.uint8)
    ok, png = cv2.imencode(".png", cv2.cvtColor(image8, cv2.COLOR_RGB2BGR))
    if not ok:
        raise TeacherError("failed to encode request image")
    return {
        "image_b64": base64.b64encode(png.tobytes()).decode("ascii"),
        "points": [[int(c), int(r)] for c, r in request.prompts.points],
        "box": None if request.prompts.box is None else [int(v) for v in request.prompts.box],
        "sample_id": request.prompts.source_id,
    }


def decode_remote_request(body: dict) -> TeacherRequest:
    data = base64.b64decode(body["image_b64"])
    bgr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_COLOR)
    if bgr is None:
        raise PromptFormatError("could not decode request image")
    image = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    points = [(int(c), int(r)) for c, r in body.get("points") or []]
    box = body.get("box")
    if points and box is not None:
        mode = "points_box"
    elif box is not None:
        mode = "box"
    elif points:
        mode = "points"
    else:
        raise PromptFormatError("request carries neither points nor box")
    prompts = PromptSet(
        source_id=str(body.get("sample_id", "remote")),
        mode=mode,
        points=points,
        point_labels=[1] * len(points),
        box=None if box is None else tuple(int(v) for v in box),
    )
    return TeacherRequest(image=image, prompts=prompts)


class RemoteTeacher(Teacher):
    """Client for a teacher served over HTTP (see ``serve_teacher``)."""

    teacher_id = "remote"
    concurrent_safe = True

    def __init__(self, endpoint_url: str, timeout: float = 60.0):
        import requests

        self._requests = requests
        self.endpoint_url = endpoint_url.rstrip("/")
        self.timeout = timeout

    def predict(self, request: TeacherRequest) -> PseudoLabel:
        body = encode_remote_request(request)
        try:
            resp = self._requests.post(
                f"{self.endpoint_url}/predict", json=body, timeout=self.timeout
            )
        except self._requests.RequestException as exc:
            raise TeacherUnavailableError(f"teacher endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise TeacherError(f"teacher endpoint returned {resp.status_code}: {resp.text[:200]}")
        payload = resp.json()
        mask = decode_mask(payload["mask_rle"])
        if mask.shape != request.image.shape[:2]:
            raise TeacherError(
                f"remote mask shape {mask.shape} != image shape {request.image.shape[:2]}"
            )
        conf = payload.get("confidence")
        return PseudoLabel(
            mask=mask,
            teacher_confidence=None if conf is None else float(conf),
            teacher_id=self.teacher_id,
        )

    def state_checksum(self) -> str:
        try:
            resp = self._requests.get(f"{self.endpoint_url}/checksum", timeout=self.timeout)
            if resp.status_code == 200:
                return str(resp.json()["checksum"])
        except self._requests.RequestException:
            pass
        return hashlib.sha256(self.endpoint_url.encode()).hexdigest()


class _TeacherHandler(BaseHTTPRequestHandler):
    teacher: Teacher = None  # set by serve_teacher

    def log_message(self, *args):  # keep test output quiet
        pass

    def _send_json(self, code: int, payload: dict):
        body = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.rstrip("/") == "/checksum" or self.path == "/checksum":
            self._send_json(200, {"checksum": self.teacher.state_checksum()})
        else:
            self._send_json(404, {"error": "unknown path"})

    def do_POST(self):
        if self.path.rstrip("/") != "/predict":
            self._send_json(404, {"error": "unknown path"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            body = json.loads(self.rfile.read(length))
            request = decode_remote_request(body)
            label = self.teacher.predict(request)
        except (TeacherError, ValueError, KeyError) as exc:
            self._send_json(400, {"error": str(exc)})
            return
        self._send_json(
            200,
            {
                "mask_rle": encode_mask(label.mask),
                "confidence": label.teacher_confidence,
            },
        )


def serve_teacher(teacher: Teacher, host: str = "127.0.0.1", port: int = 0):
    """Serve a teacher over HTTP in a daemon thread; returns (server, url).

    Call ``server.shutdown()`` to stop. Exclusive teachers are serialized
    with a lock around predict.
    """
    lock = threading.Lock()
    wrapped = teacher
    if not teacher.concurrent_safe:

        class _Serialized(Teacher):
            teacher_id = teacher.teacher_id

            def predict(self, request):
                with lock:
                    return teacher.predict(request)

            def state_checksum(self):
                with lock:
                    return teacher.state_checksum()

            def mask_prompt_size(self):
                return teacher.mask_prompt_size()

        wrapped = _Serialized()

    handler = type("_BoundTeacherHandler", (_TeacherHandler,), {"teacher": wrapped})
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://{server.server_address[0]}:{server.server_address[1]}"
    return server, url
