"""Deterministic two-domain synthetic benchmarks.

Detection scenes are small grayscale grids: round bright Gaussian blobs
are the objects to find (ground truth box = the blob's bounding square),
elongated blobs are unlabeled distractors that exist purely to create
false-positive pressure, and the two domains differ in background level,
noise, and blob contrast. Classification data are class-conditional
Gaussian blobs whose means get an affine shove between domains.

Every generator is a pure function of (params, seed): scenes draw from
independently derived per-scene seeds, so regeneration is byte-identical
and order-independent.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .network import FormatError

DATASET_MAGIC = b"EWMD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DomainParams:
    background_level: float = 0.15
    background_noise_sd: float = 0.04
    blob_contrast: float = 0.62
    blob_contrast_jitter: float = 0.0  # per-blob uniform contrast spread
    blob_radius_range: tuple = (3.0, 3.6)
    object_count_range: tuple = (1, 3)
    distractor_rate: float = 0.5

    def __post_init__(self):
        if self.blob_radius_range[0] > self.blob_radius_range[1]:
            raise ValueError(f"bad radius range {self.blob_radius_range}")
        if self.object_count_range[0] > self.object_count_range[1] or self.object_count_range[0] < 0:
            raise ValueError(f"bad object count range {self.object_count_range}")
        if self.blob_contrast - self.blob_contrast_jitter <= self.background_noise_sd:
            raise ValueError("blob contrast must exceed background noise for learnability")

    def to_dict(self):
        return {
            "background_level": self.background_level,
            "background_noise_sd": self.background_noise_sd,
            "blob_contrast": self.blob_contrast,
            "blob_contrast_jitter": self.blob_contrast_jitter,
            "blob_radius_range": list(self.blob_radius_range),
            "object_count_range": list(self.object_count_range),
            "distractor_rate": self.distractor_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            background_level=d["background_level"],
            background_noise_sd=d["background_noise_sd"],
            blob_contrast=d["blob_contrast"],
            blob_contrast_jitter=d.get("blob_contrast_jitter", 0.0),
            blob_radius_range=tuple(d["blob_radius_range"]),
            object_count_range=tuple(d["object_count_range"]),
            distractor_rate=d["distractor_rate"],
        )


@dataclass
class Annotation:
    box: tuple  # (x, y, w, h) in pixel units
    label: int = 1
    confidence: float | None = None  # present iff auto-annotated


@dataclass
class Scene:
    pixels: np.ndarray  # (H, W) float64 in [0, 1]
    annotations: list
    domain_tag: str  # "source" or "target"


@dataclass
class Dataset:
    scenes: list
    domain_tag: str
    params: DomainParams
    image_size: int


def _paint_blob(px, cx, cy, sig_x, sig_y, amplitude):
    h, w = px.shape
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    px += amplitude * np.exp(-((xs - cx) ** 2 / (2 * sig_x**2) + (ys - cy) ** 2 / (2 * sig_y**2)))


def generate_scene(params, image_size, seed, domain_tag):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    px = params.background_level + params.background_noise_sd * rng.standard_normal(
        (image_size, image_size)
    )
    annotations = []
    lo, hi = params.object_count_range
    jit = params.blob_contrast_jitter
    for _ in range(int(rng.integers(lo, hi + 1))):
        r = rng.uniform(*params.blob_radius_range)
        cx = rng.uniform(r, image_size - r)
        cy = rng.uniform(r, image_size - r)
        amp = params.blob_contrast + (rng.uniform(-jit, jit) if jit else 0.0)
        _paint_blob(px, cx, cy, r / 1.6, r / 1.6, amp)
        annotations.append(Annotation(box=(cx - r, cy - r, 2 * r, 2 * r), label=1))
    for _ in range(int(rng.poisson(params.distractor_rate))):
        r = rng.uniform(*params.blob_radius_range)
        elong = rng.uniform(2.4, 3.2)
        cx = rng.uniform(r, image_size - r)
        cy = rng.uniform(r, image_size - r)
        amp = params.blob_contrast + (rng.uniform(-jit, jit) if jit else 0.0)
        sig = r / 1.6
        if rng.uniform() < 0.5:
            _paint_blob(px, cx, cy, sig * elong, sig / elong, amp)
        else:
            _paint_blob(px, cx, cy, sig / elong, sig * elong, amp)
    np.clip(px, 0.0, 1.0, out=px)
    return Scene(pixels=px, annotations=annotations, domain_tag=domain_tag)


def gen_detection_dataset(params, n_images, seed, image_size=32, domain_tag="source"):
    """Deterministic scene list; scene i draws from a seed derived as (seed, i)."""
    if n_images <= 0:
        raise ValueError(f"n_images must be positive, got {n_images}")
    scenes = [
        generate_scene(params, image_size, [int(seed), i], domain_tag) for i in range(n_images)
    ]
    return Dataset(scenes=scenes, domain_tag=domain_tag, params=params, image_size=image_size)


# ---------------------------------------------------------------------------
# window extraction


@dataclass
class WindowSample:
    pixels: np.ndarray  # flattened window, length window_size**2
    box_target: tuple | None  # window-normalized (x, y, w, h); present iff label == 1
    label: int
    origin: tuple = (0, 0)  # (x0, y0) of the window in the image
    scene_index: int = -1


def _box_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def window_origins(image_size, window_size, stride):
    return [
        (x0, y0)
        for y0 in range(0, image_size - window_size + 1, stride)
        for x0 in range(0, image_size - window_size + 1, stride)
    ]


def extract_windows(scene, window_size=8, stride=4, pos_iou=0.5, neg_iou=0.3, scene_index=-1):
    """Slice a scene into training windows with IoU-based label assignment.

    A window is positive when its max IoU against a ground truth box
    reaches ``pos_iou`` (target = that box in window-normalized coords,
    clipped to the window), negative when below ``neg_iou``; windows in
    between are dropped.
    """
    h, w = scene.pixels.shape
    if window_size > min(h, w):
        raise ValueError(f"window {window_size} exceeds image {scene.pixels.shape}")
    gt = [a.box for a in scene.annotations if a.label == 1]
    samples = []
    for x0, y0 in window_origins(w, window_size, stride):
        wbox = (float(x0), float(y0), float(window_size), float(window_size))
        best, best_box = 0.0, None
        for g in gt:
            v = _box_iou(wbox, g)
            if v > best:
                best, best_box = v, g
        pix = scene.pixels[y0 : y0 + window_size, x0 : x0 + window_size].reshape(-1).copy()
        if best >= pos_iou:
            gx, gy, gw, gh = best_box
            x_lo = max(0.0, (gx - x0) / window_size)
            y_lo = max(0.0, (gy - y0) / window_size)
            x_hi = min(1.0, (gx + gw - x0) / window_size)
            y_hi = min(1.0, (gy + gh - y0) / window_size)
            samples.append(
                WindowSample(
                    pixels=pix,
                    box_target=(x_lo, y_lo, x_hi - x_lo, y_hi - y_lo),
                    label=1,
                    origin=(x0, y0),
                    scene_index=scene_index,
                )
            )
        elif best < neg_iou:
            samples.append(
                WindowSample(pixels=pix, box_target=None, label=0, origin=(x0, y0), scene_index=scene_index)
            )
    return samples


def extract_all_windows(dataset, window_size=8, stride=4, pos_iou=0.5, neg_iou=0.3):
    out = []
    for i, scene in enumerate(dataset.scenes):
        out.extend(extract_windows(scene, window_size, stride, pos_iou, neg_iou, scene_index=i))
    return out


# ---------------------------------------------------------------------------
# classification blobs


@dataclass(frozen=True)
class BlobDomainParams:
    """Affine shove applied to the shared class means, plus covariance scale."""

    shift: tuple = ()
    rotation_deg: float = 0.0
    cov_scale: float = 1.0


@dataclass
class LabeledSet:
    x: np.ndarray  # (n, dim)
    y: np.ndarray  # (n,) int labels


def _transform_means(means, params):
    out = means.copy()
    if params.rotation_deg:
        th = np.deg2rad(params.rotation_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        out[:, :2] = out[:, :2] @ rot.T
    if params.shift:
        out = out + np.asarray(params.shift, dtype=np.float64)
    return out


def gen_classification_dataset(
    source_params, target_params, n_per_class=100, classes=3, seed=0, dim=2, class_sep=3.0
):
    """Two labeled sets with shared class structure and a domain shift between them."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    base_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    # class means sit on a ring in the first two dims (guaranteed separation)
    # with a small seeded jitter in all dims
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = class_sep * np.cos(angles)
    means[:, 1 % dim] = class_sep * np.sin(angles)
    means += 0.3 * base_rng.normal(size=(classes, dim))
    sets = []
    for domain_id, params in ((1, source_params), (2, target_params)):
        shifted = _transform_means(means, params)
        xs, ys = [], []
        for c in range(classes):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), domain_id, c]))
            xs.append(shifted[c] + np.sqrt(params.cov_scale) * rng.standard_normal((n_per_class, dim)))
            ys.append(np.full(n_per_class, c, dtype=np.int64))
        sets.append(LabeledSet(x=np.concatenate(xs), y=np.concatenate(ys)))
    return sets[0], sets[1]


# ---------------------------------------------------------------------------
# serialization


def dataset_to_bytes(dataset):
    payload = b"".join(s.pixels.astype("<f8").tobytes() for s in dataset.scenes)
    header = json.dumps(
        {
            "image_size": dataset.image_size,
            "domain_tag": dataset.domain_tag,
            "params": dataset.params.to_dict(),
            "scenes": [
                [
                    [list(a.box), a.label, a.confidence]
                    for a in s.annotations
                ]
                for s in dataset.scenes
            ],
            "crc32": zlib.crc32(payload),
        },
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack("<4sII", DATASET_MAGIC, DATASET_VERSION, len(header)) + header + payload


def dataset_from_bytes(blob):
    if len(blob) < 12:
        raise FormatError("dataset container too short")
    magic, version, hlen = struct.unpack("<4sII", blob[:12])
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if len(blob) < 12 + hlen:
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}")
    payload = blob[12 + hlen :]
    size = header["image_size"]
    n_scenes = len(header["scenes"])
    if len(payload) != n_scenes * size * size * 8:
        raise FormatError(f"payload is {len(payload)} bytes, expected {n_scenes * size * size * 8}")
    if zlib.crc32(payload) != header["crc32"]:
        raise FormatError("payload checksum mismatch")
    scenes = []
    for i, anns in enumerate(header["scenes"]):
        px = (
            np.frombuffer(payload[i * size * size * 8 : (i + 1) * size * size * 8], dtype="<f8")
            .astype(np.float64)
            .reshape(size, size)
        )
        annotations = []
        for box, label, conf in anns:
            x, y, w, h = box
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > size or y + h > size:
                raise FormatError(f"scene {i}: box {box} outside image bounds")
            if label not in (0, 1):
                raise FormatError(f"scene {i}: bad label {label}")
            annotations.append(Annotation(box=tuple(box), label=label, confidence=conf))
        scenes.append(Scene(pixels=px, annotations=annotations, domain_tag=header["domain_tag"]))
    return Dataset(
        scenes=scenes,
        domain_tag=header["domain_tag"],
        params=DomainParams.from_dict(header["params"]),
        image_size=size,
    )


def save_dataset(dataset, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
