"""Datasets: synthetic stick figures, COCO-keypoints crops, augmentation and splits."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import ConfigError, DataConfig
from .metrics import COCO_K, HEATMAP_STRIDE, gaussian_heatmaps

logger = logging.getLogger(__name__)

SYNTHETIC_JOINTS = ("head", "left_elbow", "right_elbow", "left_wrist", "right_wrist")
SYNTHETIC_FLIP_PAIRS = ((1, 2), (3, 4))
COCO_JOINTS = ("nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder",
               "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
               "left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle")
COCO_FLIP_PAIRS = tuple((i, i + 1) for i in range(1, 17, 2))
CACHE_VERSION = 1
MARGIN = 2.0


@dataclass
class KeypointSample:
    image: np.ndarray        # (3, H, W) float32
    keypoints: np.ndarray    # (K, 2) x, y in pixels
    visibility: np.ndarray   # (K,) in {0, 1, 2}
    area: float              # instance scale s = sqrt(area)


@dataclass(frozen=True)
class KeypointDataset:
    images: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray
    areas: np.ndarray
    k: np.ndarray
    flip_pairs: tuple = ()
    joint_names: tuple = ()
    name: str = ""
    indices: np.ndarray | None = None  # provenance inside the parent dataset

    def __post_init__(self):
        for arr in (self.images, self.keypoints, self.visibility, self.areas, self.k):
            arr.setflags(write=False)
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.images)))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[-2:])

    @property
    def heatmap_size(self) -> tuple[int, int]:
        h, w = self.image_size
        return (math.ceil(h / HEATMAP_STRIDE), math.ceil(w / HEATMAP_STRIDE))

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[1]

    def sample(self, i: int) -> KeypointSample:
        return KeypointSample(self.images[i].copy(), self.keypoints[i].copy(),
                              self.visibility[i].copy(), float(self.areas[i]))

    def subset(self, idx, name: str | None = None) -> "KeypointDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return KeypointDataset(self.images[idx], self.keypoints[idx], self.visibility[idx],
                               self.areas[idx], self.k, self.flip_pairs, self.joint_names,
                               name or self.name, self.indices[idx])

    def batch(self, idx, samples: list[KeypointSample] | None = None) -> dict:
        """Tensors for a batch; ``samples`` overrides the stored ones (augmented copies)."""
        if samples is None:
            samples = [self.sample(int(i)) for i in idx]
        hm_size = self.heatmap_size
        return {
            "image": torch.from_numpy(np.stack([s.image for s in samples])),
            "target": torch.from_numpy(np.stack([
                gaussian_heatmaps(s.keypoints, s.visibility, hm_size) for s in samples])),
            "visibility": torch.from_numpy(np.stack([s.visibility for s in samples])),
            "keypoints": np.stack([s.keypoints for s in samples]),
            "areas": np.array([s.area for s in samples]),
        }


def train_val_split(ds: KeypointDataset, val_size: int, seed: int):
    """Disjoint, seed-stable split."""
    if not 0 < val_size < len(ds):
        raise ValueError(f"val_size {val_size} out of range for {len(ds)} samples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    val_idx, train_idx = np.sort(perm[:val_size]), np.sort(perm[val_size:])
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")


# ---------------------------------------------------------------- synthetic


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(L2, 1e-9), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _pose(rng: np.random.Generator, h: int, w: int):
    """Joint positions of one figure; left-side joints sit on the image right."""
    u = min(h, w) / 48.0 * rng.uniform(0.8, 1.05)
    tilt = np.deg2rad(rng.uniform(-15, 15))
    up = np.array([np.sin(tilt), -np.cos(tilt)])
    side = np.array([np.cos(tilt), np.sin(tilt)])   # toward image right
    neck = np.array([rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.45) * h])
    head = neck + up * 5.5 * u
    hip = neck - up * 14.0 * u
    joints = {"head": head, "neck": neck, "hip": hip}
    for name, sgn in (("left", 1.0), ("right", -1.0)):
        shoulder = neck + sgn * side * 5.5 * u
        a1 = rng.uniform(-np.pi, np.pi)
        a2 = a1 + rng.uniform(-2.6, 2.6)
        elbow = shoulder + 8.5 * u * np.array([np.sin(a1) * sgn, np.cos(a1)])
        wrist = elbow + 7.5 * u * np.array([np.sin(a2) * sgn, np.cos(a2)])
        hip_s = hip + sgn * side * 3.5 * u
        knee = hip_s + 10.0 * u * np.array([sgn * rng.uniform(0.0, 0.5), 1.0])
        ankle = knee + 9.0 * u * np.array([sgn * rng.uniform(-0.2, 0.3), 1.0])
        joints.update({f"{name}_shoulder": shoulder, f"{name}_elbow": elbow,
                       f"{name}_wrist": wrist, f"{name}_hip": hip_s,
                       f"{name}_knee": knee, f"{name}_ankle": ankle})
    return joints, u


LIMBS = [("neck", "hip"), ("left_shoulder", "right_shoulder"), ("left_hip", "right_hip"),
         ("left_shoulder", "left_elbow"), ("left_elbow", "left_wrist"),
         ("right_shoulder", "right_elbow"), ("right_elbow", "right_wrist"),
         ("left_hip", "left_knee"), ("left_knee", "left_ankle"),
         ("right_hip", "right_knee"), ("right_knee", "right_ankle")]


def _background(rng, h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.empty((3, h, w), np.float32)
    base = rng.uniform(0.2, 0.8, size=3)
    for c in range(3):
        layer = np.full((h, w), base[c], np.float32)
        for _ in range(3):
            fx, fy = rng.uniform(-0.3, 0.3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            layer += rng.uniform(0.03, 0.12) * np.sin(fx * xs + fy * ys + phase)
        img[c] = layer
    return img


def render_figure(rng: np.random.Generator, h: int, w: int, thickness: float, noise: float):
    for _ in range(1000):
        joints, u = _pose(rng, h, w)
        kps = np.array([joints[n] for n in SYNTHETIC_JOINTS])
        if (kps[:, 0].min() >= MARGIN and kps[:, 0].max() <= w - 1 - MARGIN
                and kps[:, 1].min() >= MARGIN and kps[:, 1].max() <= h - 1 - MARGIN):
            break
    else:  # pragma: no cover - the pose prior makes this practically unreachable
        raise RuntimeError("could not place a figure inside the image")
    img = _background(rng, h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    dist = np.full((h, w), np.inf, np.float32)
    for a, b in LIMBS:
        dist = np.minimum(dist, _segment_distance(xs, ys, joints[a], joints[b]))
    half = thickness * u / 2
    cover = np.clip(half + 0.5 - dist, 0.0, 1.0)
    head_r = 3.2 * u
    hx, hy = joints["head"]
    cover = np.maximum(cover, np.clip(head_r + 0.5 - np.hypot(xs - hx, ys - hy), 0.0, 1.0))
    color = rng.uniform(0, 1, size=3).astype(np.float32)
    bg_mean = img.mean(axis=(1, 2))
    if np.abs(color - bg_mean).sum() < 0.6:
        color = np.where(bg_mean > 0.5, color * 0.3, 1 - (1 - color) * 0.3)
    img = img * (1 - cover) + color[:, None, None] * cover
    img += rng.normal(0, noise, size=img.shape).astype(np.float32)
    pts = np.array(list(joints.values()))
    x0, y0 = pts.min(axis=0) - [half, half]
    x1, y1 = pts.max(axis=0) + [half, half]
    y0 = min(y0, hy - head_r)
    area = float((x1 - x0) * (y1 - y0))
    return np.clip(img, 0, 1).astype(np.float32), kps.astype(np.float32), area


def generate_synthetic(cfg: DataConfig, size: int | None = None) -> KeypointDataset:
    """Deterministic (per seed) dataset of stick figures, all keypoints visible."""
    n = cfg.train_size + cfg.val_size if size is None else size
    h, w = cfg.image_size
    rng = np.random.default_rng(cfg.seed)
    images = np.empty((n, 3, h, w), np.float32)
    kps = np.empty((n, len(SYNTHETIC_JOINTS), 2), np.float32)
    areas = np.empty(n, np.float64)
    for i in range(n):
        images[i], kps[i], areas[i] = render_figure(rng, h, w, cfg.limb_thickness, cfg.noise)
    vis = np.full((n, len(SYNTHETIC_JOINTS)), 2, np.int64)
    k = np.full(len(SYNTHETIC_JOINTS), cfg.oks_k)
    return KeypointDataset(images, kps, vis, areas, k, SYNTHETIC_FLIP_PAIRS, SYNTHETIC_JOINTS,
                           "synthetic")


def save_dataset(ds: KeypointDataset, path: str | Path) -> None:
    np.savez_compressed(path, cache_version=CACHE_VERSION, images=ds.images,
                        keypoints=ds.keypoints, visibility=ds.visibility, areas=ds.areas,
                        k=ds.k, flip_pairs=np.array(ds.flip_pairs, dtype=np.int64).reshape(-1, 2),
                        joint_names=np.array(ds.joint_names), name=np.array(ds.name))


def load_dataset(path: str | Path) -> KeypointDataset:
    with np.load(path, allow_pickle=False) as z:
        if int(z["cache_version"]) != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported dataset cache version {int(z['cache_version'])}")
        return KeypointDataset(z["images"], z["keypoints"], z["visibility"], z["areas"], z["k"],
                               tuple(map(tuple, z["flip_pairs"].tolist())),
                               tuple(z["joint_names"].tolist()), str(z["name"]))


# ---------------------------------------------------------------- augmentation


def flip_sample(sample: KeypointSample, flip_pairs) -> KeypointSample:
    w = sample.image.shape[-1]
    kps = sample.keypoints.copy()
    kps[:, 0] = (w - 1) - kps[:, 0]
    vis = sample.visibility.copy()
    for a, b in flip_pairs:
        kps[[a, b]] = kps[[b, a]]
        vis[[a, b]] = vis[[b, a]]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                   keypoints=kps, visibility=vis)


def rotation_center(h: int, w: int) -> tuple[float, float]:
    return ((w - 1) / 2.0, (h - 1) / 2.0)


def rotate_sample(sample: KeypointSample, angle: float) -> KeypointSample:
    """Rotate by ``angle`` degrees (counter-clockwise on screen) about the crop center.

    Keypoints that leave the crop become invisible.
    """
    if angle == 0:
        return replace(sample)
    _, h, w = sample.image.shape
    M = cv2.getRotationMatrix2D(rotation_center(h, w), angle, 1.0)
    hwc = np.ascontiguousarray(sample.image.transpose(1, 2, 0))
    rotated = cv2.warpAffine(hwc, M, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REFLECT_101)
    if rotated.ndim == 2:
        rotated = rotated[:, :, None]
    kps = sample.keypoints @ M[:, :2].T + M[:, 2]
    vis = sample.visibility.copy()
    outside = (kps[:, 0] < 0) | (kps[:, 0] > w - 1) | (kps[:, 1] < 0) | (kps[:, 1] > h - 1)
    vis[outside] = 0
    return replace(sample, image=rotated.transpose(2, 0, 1).astype(np.float32),
                   keypoints=kps.astype(np.float32), visibility=vis)


def transform_sample(sample: KeypointSample, flip: bool, angle: float,
                     flip_pairs) -> KeypointSample:
    if flip:
        sample = flip_sample(sample, flip_pairs)
    return rotate_sample(sample, angle)


def augment(sample: KeypointSample, rng: np.random.Generator | int, flip_pairs,
            flip_prob: float = 0.5, max_rotation: float = 45.0) -> KeypointSample:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    flip = bool(rng.random() < flip_prob)
    angle = float(rng.uniform(-max_rotation, max_rotation))
    return transform_sample(sample, flip, angle, flip_pairs)


# ---------------------------------------------------------------- COCO


class CocoSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class CropTransform:
    """Box crop as a pure scale-and-translate map from image to crop pixels."""

    x0: float
    y0: float
    scale: float

    def forward(self, pts):
        pts = np.asarray(pts, np.float64)
        return (pts - [self.x0, self.y0]) * self.scale

    def inverse(self, pts):
        pts = np.asarray(pts, np.float64)
        return pts / self.scale + [self.x0, self.y0]

    def matrix(self):
        s = self.scale
        return np.array([[s, 0, -self.x0 * s], [0, s, -self.y0 * s]], np.float64)


def box_to_crop(box, input_size: tuple[int, int], padding: float = 1.0) -> CropTransform:
    """Expand an (x, y, w, h) box to the output aspect around its center.

    The box grows along one axis until w / h equals out_w / out_h, is then scaled by
    ``padding``, and maps onto the full output crop.
    """
    x, y, w, h = map(float, box)
    out_h, out_w = input_size
    aspect = out_w / out_h
    cx, cy = x + w / 2, y + h / 2
    if w > aspect * h:
        h = w / aspect
    else:
        w = h * aspect
    w, h = w * padding, h * padding
    return CropTransform(cx - w / 2, cy - h / 2, out_w / w)


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: int = 0
    errors: list = field(default_factory=list)


def load_coco_keypoints(annotation_file: str | Path, image_root: str | Path,
                        split: str = "train", input_size: tuple[int, int] = (256, 192),
                        padding: float = 1.0):
    """Crop every annotated person instance to ``input_size``.

    Returns ``(dataset, report, transforms)``; missing images are recorded in the
    report and skipped, a malformed annotation file raises CocoSchemaError.
    """
    try:
        with open(annotation_file) as fh:
            doc = json.load(fh)
        images = {im["id"]: im for im in doc["images"]}
        anns = list(doc["annotations"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CocoSchemaError(f"{annotation_file}: not a COCO keypoints file ({exc!r})") from exc
    report = LoadReport()
    out_h, out_w = input_size
    crops, kps, vis, areas, transforms = [], [], [], [], []
    cache: dict = {}
    for ann in anns:
        try:
            raw = np.asarray(ann["keypoints"], np.float64).reshape(-1, 3)
            box = ann["bbox"]
            image_info = images[ann["image_id"]]
        except (KeyError, ValueError) as exc:
            raise CocoSchemaError(f"annotation {ann.get('id')}: {exc!r}") from exc
        if ann.get("iscrowd", 0) or ann.get("num_keypoints", int((raw[:, 2] > 0).sum())) == 0 \
                or box[2] <= 0 or box[3] <= 0:
            report.skipped += 1
            continue
        path = Path(image_root) / image_info["file_name"]
        if path not in cache:
            img = cv2.imread(str(path), cv2.IMREAD_COLOR)
            cache[path] = None if img is None else cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        img = cache[path]
        if img is None:
            report.errors.append(f"annotation {ann.get('id')}: cannot read {path}")
            continue
        t = box_to_crop(box, input_size, padding)
        crop = cv2.warpAffine(img, t.matrix(), (out_w, out_h), flags=cv2.INTER_LINEAR,
                              borderMode=cv2.BORDER_CONSTANT)
        crops.append(crop.transpose(2, 0, 1).astype(np.float32) / 255.0)
        kps.append(t.forward(raw[:, :2]).astype(np.float32))
        vis.append(raw[:, 2].astype(np.int64))
        areas.append(float(ann.get("area", box[2] * box[3])) * t.scale ** 2)
        transforms.append(t)
        report.loaded += 1
    if not crops:
        raise CocoSchemaError(f"{annotation_file}: no usable keypoint annotations")
    n_kp = kps[0].shape[0]
    k = COCO_K if n_kp == len(COCO_K) else np.full(n_kp, 0.1)
    names = COCO_JOINTS if n_kp == len(COCO_JOINTS) else tuple(str(i) for i in range(n_kp))
    pairs = COCO_FLIP_PAIRS if n_kp == len(COCO_JOINTS) else ()
    ds = KeypointDataset(np.stack(crops), np.stack(kps), np.stack(vis), np.array(areas), k,
                         pairs, names, split)
    for msg in report.errors:
        logger.warning(msg)
    return ds, report, transforms


def build_datasets(cfg: DataConfig, image_size: tuple[int, int] | None = None,
                   num_keypoints: int | None = None):
    """(train, val) datasets for a run configuration; ``num_keypoints`` is the network's
    keypoint count, checked against the data."""
    train, val = _build_datasets(cfg, image_size)
    if num_keypoints is not None and train.num_keypoints != num_keypoints:
        raise ConfigError(f"{cfg.source} data have {train.num_keypoints} keypoints but "
                          f"supernet.num_keypoints is {num_keypoints}")
    return train, val


def _build_datasets(cfg: DataConfig, image_size: tuple[int, int] | None):
    if cfg.source == "synthetic":
        if image_size is not None:
            cfg = replace(cfg, image_size=tuple(image_size))
        return train_val_split(generate_synthetic(cfg), cfg.val_size, cfg.seed + 1)
    if cfg.source == "coco":
        size = tuple(image_size or cfg.image_size)
        train, _, _ = load_coco_keypoints(cfg.coco_annotations, cfg.coco_images, "train", size)
        if cfg.coco_val_annotations:
            val, _, _ = load_coco_keypoints(cfg.coco_val_annotations,
                                            cfg.coco_val_images or cfg.coco_images, "val", size)
            return train, val
        return train_val_split(train, min(cfg.val_size, len(train) // 5 or 1), cfg.seed + 1)
    raise ValueError(f"unknown data source {cfg.source!r}")
