"""Bouncing-MNIST synthesis, glyph ingestion, motion-disjoint splits, and the .sdv container."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import captions as cap

GLYPH_SIZE = 28
SPEEDS = (1, 2, 3)
HORIZONTAL = "horizontal"
VERTICAL = "vertical"
AXIS_TO_MOTION = {HORIZONTAL: cap.HORIZONTAL, VERTICAL: cap.VERTICAL}
MOTION_TO_AXIS = {v: k for k, v in AXIS_TO_MOTION.items()}

SDV_MAGIC = b"SDVW"
SDV_VERSION = 1
_SDV_HEADER = struct.Struct("<4sHIHHHB")


class DataFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class DigitGlyph:
    label: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (GLYPH_SIZE, GLYPH_SIZE):
            raise ValueError(f"glyph must be 28x28, got {self.pixels.shape}")


@dataclass(frozen=True)
class MotionSpec:
    axis: str
    speed: int
    start: tuple  # (row, col) of the glyph's top-left corner
    direction: int = 1

    def __post_init__(self):
        if self.axis not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"axis must be horizontal or vertical, got {self.axis!r}")
        if self.direction not in (1, -1):
            raise ValueError(f"direction must be +1 or -1, got {self.direction}")
        if self.speed < 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")


@dataclass
class VideoSample:
    frames: np.ndarray  # (N, A, B) in [0, 1]
    id: int = 0
    caption: str | None = None


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    digits: int = 1
    seed: int = 0
    N: int = 10
    A: int = 64
    B: int = 64
    speeds: tuple = SPEEDS

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"dataset count must be >= 1, got {self.count}")
        if self.digits not in (1, 2):
            raise ValueError(f"digits per video must be 1 or 2, got {self.digits}")


@dataclass
class Dataset:
    videos: np.ndarray  # (count, N, A, B) float64 in [0, 1]
    captions: list = field(default_factory=list)

    def __len__(self):
        return self.videos.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        caps = [self.captions[i] for i in idx] if self.captions else []
        return Dataset(self.videos[idx], caps)


# --------------------------------------------------------------------------
# glyphs
# --------------------------------------------------------------------------

_FALLBACK_ART = {
    0: ["..####..", ".##..##.", "##....##", "##....##", "##....##",
        "##....##", "##....##", "##....##", ".##..##.", "..####.."],
    1: ["...##...", "..###...", ".####...", "...##...", "...##...",
        "...##...", "...##...", "...##...", "...##...", ".######."],
    2: ["..####..", ".##..##.", "##....##", "......##", ".....##.",
        "....##..", "...##...", "..##....", ".##.....", "########"],
    3: [".#####..", "##...##.", "......##", "......##", "..####..",
        "......##", "......##", "......##", "##...##.", ".#####.."],
    4: ["....##..", "...###..", "..#.##..", ".#..##..", "#...##..",
        "########", "....##..", "....##..", "....##..", "....##.."],
    5: ["#######.", "##......", "##......", "######..", ".....##.",
        "......##", "......##", "......##", "##...##.", ".#####.."],
    6: ["..####..", ".##.....", "##......", "##......", "######..",
        "##...##.", "##....##", "##....##", ".##..##.", "..####.."],
    7: ["########", "......##", ".....##.", ".....##.", "....##..",
        "....##..", "...##...", "...##...", "..##....", "..##...."],
    8: ["..####..", ".##..##.", "##....##", ".##..##.", "..####..",
        ".##..##.", "##....##", "##....##", ".##..##.", "..####.."],
    9: ["..####..", ".##..##.", "##....##", "##....##", ".##...##",
        "..######", "......##", ".....##.", "....##..", "..###..."],
}


def fallback_glyphs() -> list:
    """Ten procedural 28x28 digits (one per label) for runs without MNIST files."""
    glyphs = []
    for label in range(10):
        art = np.array([[ch == "#" for ch in row] for row in _FALLBACK_ART[label]], dtype=np.float64)
        big = np.kron(art, np.ones((2, 2)))  # 20 x 16
        canvas = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
        r0 = (GLYPH_SIZE - big.shape[0]) // 2
        c0 = (GLYPH_SIZE - big.shape[1]) // 2
        canvas[r0:r0 + big.shape[0], c0:c0 + big.shape[1]] = big
        # soft edges, like anti-aliased pen strokes
        padded = np.pad(canvas, 1)
        blurred = sum(padded[i:i + GLYPH_SIZE, j:j + GLYPH_SIZE] for i in range(3) for j in range(3)) / 9
        pixels = np.clip(np.maximum(canvas, 1.5 * blurred), 0.0, 1.0)
        glyphs.append(DigitGlyph(label, pixels))
    return glyphs


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_mnist_idx(images_path, labels_path) -> list:
    """Read IDX image/label files (optionally gzipped) into glyphs scaled to [0, 1]."""
    with _open(images_path) as fh:
        raw_images = fh.read()
    with _open(labels_path) as fh:
        raw_labels = fh.read()
    if len(raw_images) < 16:
        raise DataFormatError(f"{images_path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != 0x00000803:
        raise DataFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    if (rows, cols) != (GLYPH_SIZE, GLYPH_SIZE):
        raise DataFormatError(f"{images_path}: expected 28x28 images, got {rows}x{cols}")
    if len(raw_labels) < 8:
        raise DataFormatError(f"{labels_path}: truncated IDX header")
    lmagic, lcount = struct.unpack(">II", raw_labels[:8])
    if lmagic != 0x00000801:
        raise DataFormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if lcount != count:
        raise DataFormatError(f"image count {count} != label count {lcount}")
    body = raw_images[16:]
    if len(body) != count * rows * cols:
        raise DataFormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, got {len(body)}")
    if len(raw_labels) - 8 != count:
        raise DataFormatError(f"{labels_path}: expected {count} labels, got {len(raw_labels) - 8}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    labels = np.frombuffer(raw_labels[8:], dtype=np.uint8)
    return [DigitGlyph(int(l), p) for l, p in zip(labels, pixels)]


def write_mnist_idx(glyphs, images_path, labels_path):
    """Inverse of :func:`load_mnist_idx` (uncompressed); used for fixtures."""
    n = len(glyphs)
    px = np.stack([np.round(g.pixels * 255) for g in glyphs]).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", 0x803, n, GLYPH_SIZE, GLYPH_SIZE) + px.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", 0x801, n)
                                  + bytes(int(g.label) for g in glyphs))


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------

def trajectory(motion: MotionSpec, N: int, A: int, B: int) -> np.ndarray:
    """Top-left (row, col) per frame; the glyph bounces flush off the borders."""
    hi_r, hi_c = A - GLYPH_SIZE, B - GLYPH_SIZE
    r, c = motion.start
    if not (0 <= r <= hi_r and 0 <= c <= hi_c):
        raise ValueError(f"start {motion.start} does not fit a 28x28 glyph in {A}x{B}")
    moving = 1 if motion.axis == HORIZONTAL else 0
    hi = hi_c if moving == 1 else hi_r
    pos = [r, c]
    d = motion.direction
    out = np.empty((N, 2), dtype=np.int64)
    for k in range(N):
        out[k] = pos
        p = pos[moving] + motion.speed * d
        if p <= 0:
            p, d = 0, 1
        elif p >= hi:
            p, d = hi, -1
        pos[moving] = p
    return out


def render_layer(glyph: DigitGlyph, motion: MotionSpec, N: int, A: int, B: int) -> np.ndarray:
    video = np.zeros((N, A, B))
    for k, (r, c) in enumerate(trajectory(motion, N, A, B)):
        video[k, r:r + GLYPH_SIZE, c:c + GLYPH_SIZE] = glyph.pixels
    return video


def synthesize_single(glyph: DigitGlyph, motion: MotionSpec, N=10, A=64, B=64) -> VideoSample:
    return VideoSample(render_layer(glyph, motion, N, A, B))


def synthesize_double(glyph1, glyph2, motion1, motion2, N=10, A=64, B=64) -> VideoSample:
    """Two independently moving digits; overlapping intensities add and clip at 1."""
    layers = render_layer(glyph1, motion1, N, A, B) + render_layer(glyph2, motion2, N, A, B)
    return VideoSample(np.minimum(layers, 1.0))


def random_motion(rng, axis: str, A: int, B: int, speeds=SPEEDS) -> MotionSpec:
    start = (int(rng.integers(0, A - GLYPH_SIZE + 1)), int(rng.integers(0, B - GLYPH_SIZE + 1)))
    return MotionSpec(axis=axis, speed=int(rng.choice(speeds)), start=start,
                      direction=int(rng.choice([-1, 1])))


def _by_label(glyphs) -> dict:
    table = {}
    for g in glyphs:
        table.setdefault(g.label, []).append(g)
    return table


def synthesize_video(spec: DatasetSpec, index: int, glyph_table: dict, classes=None) -> VideoSample:
    """One video from the stream seeded by (seed, index).

    ``classes`` optionally restricts the (digit, motion) caption classes; for
    two-digit videos it restricts each slot independently.
    """
    rng = np.random.default_rng([spec.seed, index])
    slots, layers = [], []
    for _ in range(spec.digits):
        if classes is None:
            digit = int(rng.choice(sorted(glyph_table)))
            motion = cap.MOTIONS[int(rng.integers(0, 2))]
        else:
            digit, motion = classes[int(rng.integers(0, len(classes)))]
        pool = glyph_table[digit]
        glyph = pool[int(rng.integers(0, len(pool)))]
        m = random_motion(rng, MOTION_TO_AXIS[motion], spec.A, spec.B, spec.speeds)
        layers.append(render_layer(glyph, m, spec.N, spec.A, spec.B))
        slots.append((digit, motion))
    frames = np.minimum(sum(layers), 1.0)
    text = cap.caption_for(slots).text
    return VideoSample(frames, id=index, caption=text)


def synthesize_dataset(spec: DatasetSpec, glyphs=None, classes=None) -> Dataset:
    glyph_table = _by_label(fallback_glyphs() if glyphs is None else glyphs)
    videos = np.empty((spec.count, spec.N, spec.A, spec.B))
    texts = []
    for i in range(spec.count):
        v = synthesize_video(spec, i, glyph_table, classes)
        videos[i] = v.frames
        texts.append(v.caption)
    # stored datasets are 8-bit; keep in-memory data on the same grid
    return Dataset(quantize(videos), texts)


def quantize(videos) -> np.ndarray:
    return np.round(np.clip(videos, 0.0, 1.0) * 255) / 255


# --------------------------------------------------------------------------
# captions and splits
# --------------------------------------------------------------------------

def motion_disjoint_classes(seed: int) -> tuple:
    """(train_classes, test_classes): each digit keeps one motion for train, the other for test."""
    order = np.random.default_rng(seed).permutation(10)
    train, test = [], []
    for pos, digit in enumerate(order):
        first, second = (cap.VERTICAL, cap.HORIZONTAL) if pos % 2 == 0 else (cap.HORIZONTAL, cap.VERTICAL)
        train.append((int(digit), first))
        test.append((int(digit), second))
    return sorted(train), sorted(test)


def split_motion_disjoint(dataset: Dataset, seed: int = 0) -> tuple:
    """Partition a captioned single-digit dataset so no (digit, motion) class is shared."""
    if not dataset.captions:
        raise SplitError("dataset has no captions")
    parsed = [cap.parse_caption(t) for t in dataset.captions]
    if any(p.arity != 1 for p in parsed):
        raise SplitError("motion-disjoint split needs single-digit captions")
    present = {p.slots[0] for p in parsed}
    digits = {d for d, _ in present}
    for d in digits:
        if (d, cap.HORIZONTAL) not in present or (d, cap.VERTICAL) not in present:
            raise SplitError(f"digit {d} does not appear with both motions")
    train_classes, _ = motion_disjoint_classes(seed)
    train_set = set(train_classes)
    train_idx = [i for i, p in enumerate(parsed) if p.slots[0] in train_set]
    test_idx = [i for i, p in enumerate(parsed) if p.slots[0] not in train_set]
    return dataset.subset(train_idx), dataset.subset(test_idx)


def write_captions(path, texts):
    with open(path, "w", encoding="utf-8") as fh:
        for i, t in enumerate(texts):
            fh.write(f"{i}\t{t}\n")


def read_captions(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            idx, sep, text = line.partition("\t")
            if not sep or not idx.isdigit() or int(idx) != len(out):
                raise DataFormatError(f"{path}:{lineno}: expected '<index>\\t<caption>' in order")
            out.append(text)
    return out


def captions_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".captions")


# --------------------------------------------------------------------------
# .sdv container
# --------------------------------------------------------------------------

def dataset_bytes(videos) -> bytes:
    videos = np.asarray(videos)
    count, N, A, B = videos.shape
    px = np.round(np.clip(videos, 0.0, 1.0) * 255).astype(np.uint8)
    return _SDV_HEADER.pack(SDV_MAGIC, SDV_VERSION, count, N, A, B, 1) + px.tobytes()


def save_dataset(path, dataset: Dataset):
    Path(path).write_bytes(dataset_bytes(dataset.videos))
    if dataset.captions:
        write_captions(captions_path(path), dataset.captions)


def parse_dataset_bytes(raw: bytes, origin: str = "<bytes>") -> np.ndarray:
    if len(raw) < _SDV_HEADER.size:
        raise DataFormatError(f"{origin}: truncated header")
    magic, version, count, N, A, B, channels = _SDV_HEADER.unpack(raw[:_SDV_HEADER.size])
    if magic != SDV_MAGIC:
        raise DataFormatError(f"{origin}: bad magic {magic!r}")
    if version != SDV_VERSION:
        raise DataFormatError(f"{origin}: unsupported version {version}")
    if channels != 1:
        raise DataFormatError(f"{origin}: expected 1 channel, got {channels}")
    expected = count * N * A * B
    body = raw[_SDV_HEADER.size:]
    if len(body) != expected:
        raise DataFormatError(f"{origin}: expected {expected} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, N, A, B) / 255.0


def load_dataset(path) -> Dataset:
    videos = parse_dataset_bytes(Path(path).read_bytes(), str(path))
    cpath = captions_path(path)
    texts = read_captions(cpath) if cpath.exists() else []
    if texts and len(texts) != videos.shape[0]:
        raise DataFormatError(f"{cpath}: {len(texts)} captions for {videos.shape[0]} videos")
    return Dataset(videos, texts)
