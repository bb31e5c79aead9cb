"""Deterministic synthetic spatial-QA samples.

A scene is a handful of flat, camera-facing disks in a cube. Every frame is an
orthographic view along +x from a camera that pans sideways over the clip, so
image position encodes (y, z) and never x. The vision channel paints each disk
with its appearance value in a fixed (id) order, which keeps it independent of
depth; the geometry channel z-buffers the disks and stores
``clip(1 - depth / 10 m, 0, 1)``. Query points are drawn as bright single-pixel
markers in both channels.

Task families:

* ``low`` - two marked points in the first frame, which one is closer
* ``high`` - which of two named objects is closer to a third one
* ``distance`` - surface distance between two named objects in metres
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import (
    FramePlan,
    plan_frames,
    plan_resolution,
    scaled_size,
    trim_offsets,
)
from .decoder import VOCAB, Vocab
from .exceptions import ArgumentError, FileError, GenerationError
from .numerics import Rng, round_half_away

logger = logging.getLogger(__name__)

LEVELS = ("low", "high", "distance")

MARKER_A = 2.0
MARKER_B = 3.0
DEPTH_SCALE = 10.0  # metres at which the geometry channel reaches 0
BACKGROUND = 0.0
MAX_SCENE_ATTEMPTS = 1000
MAX_RESAMPLES = 100

_NOISE_SALT = 7
_LEVEL_SALT = {"low": 11, "high": 13, "distance": 17}
_MIX_SALT = 99


def appearance_value(appearance: int) -> float:
    return 0.2 + 0.15 * appearance


def depth_intensity(depth):
    return np.clip(1.0 - np.asarray(depth, dtype=np.float64) / DEPTH_SCALE, 0.0, 1.0)


@dataclass(frozen=True)
class DataConfig:
    train_seed: int = 0
    eval_seed: int = 1_000_000_000
    eval_count: int = 128
    task_mix: tuple[float, ...] = (0.5, 0.5, 0.0)
    source_size: tuple[int, int] = (16, 16)
    target: int = 16
    resize_side: str = "short"
    frame_bounds: tuple[int, int] = (4, 8)
    interval: float = 2.0
    fps: float = 2.0
    duration: tuple[float, float] = (6.0, 18.0)
    world_half: float = 4.0
    radius: tuple[float, float] = (1.0, 1.5)
    view_extent: float = 10.0
    camera_distance: float = 5.0
    pan: float = 1.0
    noise_std: float = 0.05
    min_gap: float = 0.25
    train_path: str | None = None
    eval_path: str | None = None


@dataclass(frozen=True)
class SceneObject:
    id: int
    position: tuple[float, float, float]
    radius: float
    appearance: int


@dataclass(frozen=True)
class Camera:
    frame: int
    position: tuple[float, float, float]
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def depth_of(self, point) -> float:
        return float(np.dot(np.asarray(point) - np.asarray(self.position), np.asarray(self.direction)))


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    objects: tuple[SceneObject, ...]
    cameras: tuple[Camera, ...]
    bounds: float
    frame_plan: FramePlan

    def surface_distance(self, a: int, b: int) -> float:
        first, second = self.objects[a], self.objects[b]
        gap = np.linalg.norm(np.subtract(first.position, second.position))
        return float(gap - first.radius - second.radius)


@dataclass(frozen=True)
class FrameGeometry:
    """Pixel layout shared by every frame: rendered at ``scaled`` then center-trimmed to ``size``."""

    scaled: tuple[int, int]
    size: tuple[int, int]
    offsets: tuple[int, int]
    metres_per_pixel: float

    @classmethod
    def plan(cls, data: DataConfig, patch: int, merge: int) -> "FrameGeometry":
        h_in, w_in = data.source_size
        scaled = scaled_size(h_in, w_in, data.target, patch, merge, data.resize_side)
        size = plan_resolution(h_in, w_in, data.target, patch, merge, data.resize_side)
        offsets = (trim_offsets(scaled[0], size[0])[0], trim_offsets(scaled[1], size[1])[0])
        return cls(scaled, size, offsets, data.view_extent / min(scaled))

    def pixel_centres(self, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
        """World (y, z) of every pixel centre of the trimmed frame."""
        hs, ws = self.scaled
        top, left = self.offsets
        rows = np.arange(self.size[0]) + top
        cols = np.arange(self.size[1]) + left
        y = camera.position[1] + (cols + 0.5 - ws / 2) * self.metres_per_pixel
        z = camera.position[2] + (hs / 2 - rows - 0.5) * self.metres_per_pixel
        return np.meshgrid(y, z)

    def project(self, camera: Camera, point) -> tuple[int, int] | None:
        """Trimmed-frame pixel containing the projection of ``point``, or None when outside."""
        hs, ws = self.scaled
        top, left = self.offsets
        col = int(np.floor((point[1] - camera.position[1]) / self.metres_per_pixel + ws / 2)) - left
        row = int(np.floor(hs / 2 - (point[2] - camera.position[2]) / self.metres_per_pixel)) - top
        if 0 <= row < self.size[0] and 0 <= col < self.size[1]:
            return row, col
        return None


@dataclass
class Rendering:
    vision: np.ndarray
    geometry: np.ndarray
    depth: np.ndarray
    owner: np.ndarray


@dataclass(frozen=True)
class Marker:
    frame: int
    row: int
    col: int
    intensity: float


@dataclass
class QASample:
    seed: int
    level: str
    vision_frames: np.ndarray
    geometry_frames: np.ndarray
    question_ids: list[int]
    answer_ids: list[int]
    markers: tuple[Marker, ...] = ()
    query: dict = field(default_factory=dict)
    scene_seed: int | None = None
    answer_value: float | None = None

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "level": self.level,
            "frames": self.vision_frames.tolist(),
            "geometry_frames": self.geometry_frames.tolist(),
            "question_ids": list(self.question_ids),
            "answer_ids": list(self.answer_ids),
            "answer_value": self.answer_value,
        }

    @classmethod
    def from_record(cls, record: dict) -> "QASample":
        return cls(
            seed=record["seed"],
            level=record["level"],
            vision_frames=np.asarray(record["frames"], dtype=np.float64),
            geometry_frames=np.asarray(record["geometry_frames"], dtype=np.float64),
            question_ids=list(record["question_ids"]),
            answer_ids=list(record["answer_ids"]),
            answer_value=record.get("answer_value"),
        )


def _camera_offset(frame: int, frames: int, pan: float) -> float:
    if frames == 1:
        return 0.0
    return pan * (2.0 * frame / (frames - 1) - 1.0)


def gen_scene(seed: int, data: DataConfig = DataConfig()) -> SyntheticScene:
    rng = Rng(seed).generator()
    count = int(rng.integers(3, 7))
    bound = data.world_half
    for _ in range(MAX_SCENE_ATTEMPTS):
        radii = rng.uniform(*data.radius, size=count)
        positions = rng.uniform(-bound, bound, size=(count, 3))
        gaps = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
        gaps[np.diag_indices(count)] = np.inf
        if gaps.min() >= 2 * radii.max():
            break
    else:
        raise GenerationError(f"scene {seed}: no non-overlapping layout after {MAX_SCENE_ATTEMPTS} attempts")

    appearances = rng.permutation(len(Vocab.CLASSES))[:count]
    objects = tuple(
        SceneObject(i, tuple(float(v) for v in positions[i]), float(radii[i]), int(appearances[i]))
        for i in range(count)
    )

    duration = float(rng.uniform(*data.duration))
    k_min, k_max = data.frame_bounds
    source_frames = max(k_min, round_half_away(duration * data.fps))
    frame_plan = plan_frames(duration, data.interval, k_min, k_max, source_frames)
    cameras = tuple(
        Camera(f, (-data.camera_distance, _camera_offset(f, source_frames, data.pan), 0.0))
        for f in frame_plan.indices
    )
    return SyntheticScene(seed, objects, cameras, bound, frame_plan)


def render_views(scene: SyntheticScene, frames: FrameGeometry, markers=(), noise_std: float = 0.0) -> Rendering:
    views = len(scene.cameras)
    height, width = frames.size
    vision = np.zeros((views, height, width))
    depth = np.full((views, height, width), np.inf)
    owner = np.full((views, height, width), -1, dtype=np.int64)
    seen = np.zeros(len(scene.objects), dtype=bool)

    for k, camera in enumerate(scene.cameras):
        y, z = frames.pixel_centres(camera)
        for obj in scene.objects:
            covered = (y - obj.position[1]) ** 2 + (z - obj.position[2]) ** 2 <= obj.radius ** 2
            seen[obj.id] |= covered.any()
            # vision paints in id order, geometry keeps the nearest disk
            vision[k][covered] = appearance_value(obj.appearance)
            d = camera.depth_of(obj.position)
            nearer = covered & (d < depth[k])
            depth[k][nearer] = d
            owner[k][nearer] = obj.id

    if not seen.all():
        missing = [int(i) for i in np.flatnonzero(~seen)]
        raise GenerationError(f"scene {scene.seed}: objects {missing} project outside every frame")

    geometry = np.where(owner >= 0, depth_intensity(np.where(np.isfinite(depth), depth, 0.0)), BACKGROUND)
    if noise_std > 0:
        noise = Rng(scene.seed).derive(_NOISE_SALT).generator().standard_normal(size=vision.shape)
        vision = vision + noise_std * noise
    for marker in markers:
        vision[marker.frame, marker.row, marker.col] = marker.intensity
        geometry[marker.frame, marker.row, marker.col] = marker.intensity
    return Rendering(vision, geometry, depth, owner)


def answer_low(depth_a: float, depth_b: float) -> str:
    return "A" if depth_a < depth_b else "B"


def answer_high(distance_first: float, distance_second: float) -> str:
    return "A" if distance_first < distance_second else "B"


def _class_token(scene: SyntheticScene, index: int) -> str:
    return Vocab.CLASSES[scene.objects[index].appearance]


def _query_low(scene, rendering, frames, rng, data):
    camera = scene.cameras[0]
    swap = rng.random() < 0.5
    count = len(scene.objects)
    pairs = [(a, b) for a in range(count) for b in range(a + 1, count)]
    for index in rng.permutation(len(pairs)):
        a, b = pairs[index]
        if swap:
            a, b = b, a
        pixel_a = frames.project(camera, scene.objects[a].position)
        pixel_b = frames.project(camera, scene.objects[b].position)
        if pixel_a is None or pixel_b is None or pixel_a == pixel_b:
            continue
        depth_a, depth_b = rendering.depth[0][pixel_a], rendering.depth[0][pixel_b]
        if not (np.isfinite(depth_a) and np.isfinite(depth_b)) or abs(depth_a - depth_b) < data.min_gap:
            continue
        markers = (Marker(0, *pixel_a, MARKER_A), Marker(0, *pixel_b, MARKER_B))
        question = ["<bos>", "which", "point", "closer", "A", "or", "B", "?"]
        query = {"frame": 0, "a": list(pixel_a), "b": list(pixel_b)}
        return question, [answer_low(depth_a, depth_b)], markers, query, None
    return None


def _query_high(scene, rendering, frames, rng, data):
    count = len(scene.objects)
    triples = [(i, j, k) for i in range(count) for j in range(count) for k in range(j + 1, count) if i not in (j, k)]
    swap = rng.random() < 0.5
    for index in rng.permutation(len(triples)):
        anchor, first, second = triples[index]
        if swap:
            first, second = second, first
        d_first = scene.surface_distance(anchor, first)
        d_second = scene.surface_distance(anchor, second)
        if abs(d_first - d_second) < data.min_gap:
            continue
        question = ["<bos>", "which", "object", "closer", "to", _class_token(scene, anchor),
                    _class_token(scene, first), "or", _class_token(scene, second), "?"]
        query = {"anchor": anchor, "first": first, "second": second}
        return question, [answer_high(d_first, d_second)], (), query, None
    return None


def _query_distance(scene, rendering, frames, rng, data):
    count = len(scene.objects)
    pairs = [(a, b) for a in range(count) for b in range(a + 1, count)]
    for index in rng.permutation(len(pairs)):
        a, b = pairs[index]
        value = round(scene.surface_distance(a, b), 1)
        if value < 0.1:
            continue
        question = ["<bos>", "distance", _class_token(scene, a), _class_token(scene, b), "meters", "?"]
        query = {"first": a, "second": b}
        return question, list(f"{value:.1f}"), (), query, value
    return None


_QUERIES = {"low": _query_low, "high": _query_high, "distance": _query_distance}


def gen_sample(seed: int, level: str, data: DataConfig = DataConfig(), *, patch: int = 4, merge: int = 2,
               vocab: Vocab = VOCAB) -> QASample:
    if level not in _QUERIES:
        raise ArgumentError(f"unknown task level {level!r}; expected one of {', '.join(LEVELS)}")
    frames = FrameGeometry.plan(data, patch, merge)

    for attempt in range(MAX_RESAMPLES):
        scene_seed = seed if attempt == 0 else Rng(seed).derive(attempt).seed
        scene = gen_scene(scene_seed, data)
        try:
            rendering = render_views(scene, frames)
        except GenerationError:
            logger.warning("sample %s: scene %s rejected, resampling", seed, scene_seed)
            continue
        rng = Rng(scene_seed).derive(_LEVEL_SALT[level]).generator()
        found = _QUERIES[level](scene, rendering, frames, rng, data)
        if found is not None:
            break
    else:
        raise GenerationError(f"sample {seed} ({level}): unresolvable tie after {MAX_RESAMPLES} resamples")

    question, answer, markers, query, value = found
    rendering = render_views(scene, frames, markers, data.noise_std)
    return QASample(
        seed=seed,
        level=level,
        vision_frames=rendering.vision,
        geometry_frames=rendering.geometry,
        question_ids=vocab.encode(question),
        answer_ids=vocab.encode(answer) + [vocab.eos],
        markers=markers,
        query=query,
        scene_seed=scene_seed,
        answer_value=value,
    )


def sample_level(seed: int, mix) -> str:
    weights = np.asarray(mix, dtype=np.float64)
    if weights.shape != (len(LEVELS),) or (weights < 0).any() or weights.sum() <= 0:
        raise ArgumentError(f"task mix must be {len(LEVELS)} non-negative weights, got {list(mix)}")
    draw = Rng(seed).derive(_MIX_SALT).generator().random() * weights.sum()
    return LEVELS[min(int(np.searchsorted(np.cumsum(weights), draw, side="right")), len(LEVELS) - 1)]


def training_samples(data: DataConfig, start: int, count: int, *, patch: int, merge: int) -> list[QASample]:
    """Samples ``start .. start + count - 1`` of the training stream; sample i uses seed train_seed + i."""
    samples = []
    for index in range(start, start + count):
        seed = data.train_seed + index
        samples.append(gen_sample(seed, sample_level(seed, data.task_mix), data, patch=patch, merge=merge))
    return samples


def eval_samples(data: DataConfig, level: str, count: int, *, patch: int, merge: int) -> list[QASample]:
    return [gen_sample(data.eval_seed + i, level, data, patch=patch, merge=merge) for i in range(count)]


def write_jsonl(samples, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for sample in samples:
                f.write(json.dumps(sample.to_record(), sort_keys=True) + "\n")
    except OSError as e:
        raise FileError(f"cannot write samples to {path}: {e}")


def read_jsonl(path) -> list[QASample]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise FileError(f"cannot read samples from {path}: {e}")
    samples = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            samples.append(QASample.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FileError(f"{path}:{number}: malformed sample record ({e})")
    return samples
