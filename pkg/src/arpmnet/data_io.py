"""Synthetic pelvic phantoms and PGM image/label files.

Class ids: 0 background, 1 prostate, 2 bladder, 3 rectum, 4 femur-left,
5 femur-right. Organs are ellipses placed in the priority order femurs,
bladder, rectum, prostate; an organ that would overlap one already placed is
re-drawn, so regions are disjoint by construction.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import LabelMap

CLASS_NAMES = ("background", "prostate", "bladder", "rectum", "femur_left", "femur_right")
BACKGROUND, PROSTATE, BLADDER, RECTUM, FEMUR_L, FEMUR_R = range(6)
MANIFEST_HEADER = ["index", "image_path", "label_path", "seed"]


class PhantomError(RuntimeError):
    """Organs could not be placed without overlap."""


class PGMFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    num_classes: int = 6
    seed: int = 0
    noise_sigma: float = 0.02
    background: float = 0.30
    prostate: float = 0.33
    bladder: float = 0.70
    rectum: float = 0.45
    femur: float = 0.90
    # semi-axis ranges in pixels at size 64; scaled with size
    femur_radius: tuple[float, float] = (6.5, 8.0)
    bladder_axes: tuple[float, float, float, float] = (9.0, 12.0, 12.0, 15.0)
    prostate_axes: tuple[float, float] = (4.5, 6.0)
    rectum_axes: tuple[float, float] = (5.0, 7.0)
    jitter: float = 3.0
    spacing_mm: float = 1.0
    max_retries: int = 50

    def __post_init__(self):
        if self.num_classes != 6:
            raise ValueError("phantoms have exactly 6 classes")
        if self.size < 16:
            raise ValueError("phantom size must be at least 16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    labels: LabelMap
    index: int = 0
    organ_counts: dict[int, int] = field(default_factory=dict)

    @property
    def spacing(self) -> float:
        return self.labels.spacing


def _ellipse(shape, cy, cx, ry, rx, angle=0.0) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, index: int) -> Sample:
    """Deterministic phantom for ``(spec.seed, index)``.

    Femurs are small bright discs, the bladder a large bright ellipse, the
    rectum a small mid-contrast ellipse and the prostate a small ellipse only
    a few hundredths brighter than background, wedged between bladder and
    rectum.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    s = n / 64.0
    shape = (n, n)
    labels = np.zeros(shape, dtype=np.int64)
    occupied = np.zeros(shape, dtype=bool)

    def jit():
        return rng.uniform(-spec.jitter, spec.jitter) * s

    def place(cls, draw):
        for _ in range(spec.max_retries):
            m = draw()
            if m.any() and not (m & occupied).any():
                labels[m] = cls
                occupied[m] = True
                return m
        raise PhantomError(f"could not place {CLASS_NAMES[cls]} for index {index}")

    fy = 0.58 * n
    for cls, fx in ((FEMUR_L, 0.17 * n), (FEMUR_R, 0.83 * n)):
        place(cls, lambda fx=fx: _ellipse(shape, fy + jit(), fx + jit(), *(rng.uniform(*spec.femur_radius) * s,) * 2))

    def bladder():
        by, bx = 0.30 * n + jit(), 0.5 * n + jit()
        bry = rng.uniform(*spec.bladder_axes[:2]) * s
        brx = rng.uniform(*spec.bladder_axes[2:]) * s
        return _ellipse(shape, by, bx, bry, brx, rng.uniform(-0.2, 0.2))

    bl = place(BLADDER, bladder)
    rows, cols = np.nonzero(bl)
    bottom, bx = rows.max(), cols.mean()

    pry = rng.uniform(*spec.prostate_axes) * s
    prx = rng.uniform(*spec.prostate_axes) * s
    rry = rng.uniform(*spec.rectum_axes) * s
    rrx = rng.uniform(*spec.rectum_axes) * s
    # the rectum leaves a slot for the prostate between it and the bladder
    place(
        RECTUM,
        lambda: _ellipse(shape, bottom + 2 * pry + rry + (2.5 + rng.uniform(0, 1.5)) * s, bx + jit() / 2, rry, rrx),
    )
    place(PROSTATE, lambda: _ellipse(shape, bottom + pry + rng.uniform(0.8, 1.5) * s, bx + jit() / 2, pry, prx))

    intensity = np.array([spec.background, spec.prostate, spec.bladder, spec.rectum, spec.femur, spec.femur])
    image = intensity[labels]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=shape)
    image = np.clip(image, 0.0, 1.0)
    counts = {c: int((labels == c).sum()) for c in range(spec.num_classes)}
    return Sample(image[None], LabelMap(labels, spec.spacing_mm), index, counts)


def one_hot(labels, num_classes: int) -> np.ndarray:
    """``[C, H, W]`` indicator planes (or ``[B, C, H, W]`` for a batch of maps)."""
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    eye = np.eye(num_classes)
    out = eye[lab]
    return np.moveaxis(out, -1, -3)


# ---------------------------------------------------------------------------
# PGM files


def _write_pgm(path, arr: np.ndarray, maxval: int, spacing: float) -> None:
    h, w = arr.shape
    header = f"P5\n# spacing_mm={spacing!r}\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_pgm(path) -> tuple[np.ndarray, int, float | None]:
    raw = Path(path).read_bytes()
    pos = 0
    tokens: list[bytes] = []
    spacing = None
    while len(tokens) < 4:
        if pos >= len(raw):
            raise PGMFormatError(f"{path}: truncated header")
        c = raw[pos : pos + 1]
        if c == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise PGMFormatError(f"{path}: unterminated comment")
            m = re.match(rb"#\s*spacing_mm=(\S+)", raw[pos:end])
            if m:
                spacing = float(m.group(1))
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMFormatError(f"{path}: malformed header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PGMFormatError(f"{path}: bad dimensions or maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    body = raw[pos : pos + nbytes]
    if len(body) != nbytes:
        raise PGMFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=dtype).reshape(h, w), maxval, spacing


def save_image(path, image: np.ndarray, spacing: float = 1.0) -> None:
    """16-bit PGM, value ``round(intensity * 65535)``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image intensities must lie in [0, 1]")
    _write_pgm(path, np.rint(img * 65535), 65535, spacing)


def load_image(path) -> tuple[np.ndarray, float]:
    """Returns ``([1, H, W] float image, spacing)``."""
    arr, maxval, spacing = _read_pgm(path)
    if maxval != 65535:
        raise PGMFormatError(f"{path}: expected a 16-bit image (maxval 65535), found maxval {maxval}")
    return (arr.astype(np.float64) / 65535.0)[None], 1.0 if spacing is None else spacing


def save_labels(path, labels: LabelMap) -> None:
    lab = labels.labels
    if lab.max(initial=0) > 255:
        raise ValueError("label ids must fit in 8 bits")
    _write_pgm(path, lab, 255, labels.spacing)


def load_labels(path, num_classes: int) -> LabelMap:
    arr, maxval, spacing = _read_pgm(path)
    if maxval > 255:
        raise PGMFormatError(f"{path}: label maps are 8-bit, found maxval {maxval}")
    lab = arr.astype(np.int64)
    if lab.max(initial=0) >= num_classes:
        raise PGMFormatError(f"{path}: label value {lab.max()} >= {num_classes}")
    return LabelMap(lab, 1.0 if spacing is None else spacing)


# ---------------------------------------------------------------------------
# datasets


def write_dataset(spec: PhantomSpec, out_dir, count: int) -> Path:
    """Write ``count`` phantoms plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        s = generate_phantom(spec, i)
        img_name, lab_name = f"image_{i:05d}.pgm", f"labels_{i:05d}.pgm"
        save_image(out / img_name, s.image, s.spacing)
        save_labels(out / lab_name, s.labels)
        rows.append([i, img_name, lab_name, spec.seed])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
        rows = list(reader)
    for r in rows:
        r["image_path"] = str(path.parent / r["image_path"])
        r["label_path"] = str(path.parent / r["label_path"])
    return rows


def load_dataset(path, num_classes: int) -> tuple[np.ndarray, np.ndarray, float]:
    """All samples of a manifest as ``(images [N,1,H,W], labels [N,H,W], spacing)``."""
    rows = read_manifest(path)
    if not rows:
        raise ValueError(f"{path}: dataset is empty")
    images, labels, spacing = [], [], 1.0
    for r in rows:
        img, spacing = load_image(r["image_path"])
        images.append(img)
        labels.append(load_labels(r["label_path"], num_classes).labels)
    return np.stack(images), np.stack(labels), spacing


def make_dataset(spec: PhantomSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    """In-memory equivalent of :func:`write_dataset` (no quantisation)."""
    samples = [generate_phantom(spec, i) for i in range(count)]
    return np.stack([s.image for s in samples]), np.stack([s.labels.labels for s in samples])
