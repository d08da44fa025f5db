"""Synthetic fine-grained dataset with planted glyphs, PPM I/O and directory layout.

Every image shares one coarse shape (a grey ellipse on a grey field). The
class is carried only by a small high-contrast binary glyph placed at a
uniformly random position, so telling classes apart means finding and
reading a region a few patches wide.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ON_LEVEL, OFF_LEVEL, JITTER = 0.92, 0.08, 0.06


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    num_classes: int = 4
    glyph_size: int = 8
    clutter_density: float = 0.5
    train_count: int = 2000
    test_count: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("train_count and test_count must be >= 1")
        if self.glyph_size < 2:
            raise ValueError("glyph_size must be >= 2")
        if self.glyph_size > self.image_size // 4:
            raise ValueError(f"glyph size {self.glyph_size} exceeds image_size/4 = {self.image_size // 4}")
        if not 0.0 <= self.clutter_density <= 1.0:
            raise ValueError("clutter_density must lie in [0, 1]")


@dataclass
class SynthSample:
    image: np.ndarray
    label: int
    glyph_box: tuple[int, int, int, int] | None


@dataclass
class Dataset:
    """Images (n, S, S, 3) in [0, 1], labels (n,), optional boxes (n, 4) as x0 y0 x1 y1."""

    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SynthSample:
        box = None if self.boxes is None else tuple(int(v) for v in self.boxes[i])
        return SynthSample(self.images[i], int(self.labels[i]), box)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], None if self.boxes is None else self.boxes[idx])

    @property
    def image_size(self) -> int:
        return self.images.shape[1]


def class_glyphs(spec: SynthSpec) -> np.ndarray:
    """Distinct binary bitmaps, one per class, drawn on a grid of 2x2-pixel cells.

    Odd glyph sizes fall back to 1-pixel cells. Every pair of classes differs
    in at least a quarter of its cells and each bitmap is 30-70% lit.
    """
    rng = np.random.default_rng([spec.seed, 0x61797068])
    g = spec.glyph_size
    cell = 2 if g % 2 == 0 and g >= 4 else 1
    k = g // cell
    glyphs: list[np.ndarray] = []
    for _ in range(100_000):
        if len(glyphs) == spec.num_classes:
            break
        cand = (rng.random((k, k)) < 0.5).astype(np.uint8)
        if 0.3 <= cand.mean() <= 0.7 and all(np.sum(cand != o) >= k * k // 4 for o in glyphs):
            glyphs.append(cand)
    if len(glyphs) < spec.num_classes:
        raise ValueError(f"cannot draw {spec.num_classes} distinct {g}x{g} glyphs")
    return np.stack([np.kron(m, np.ones((cell, cell), dtype=np.uint8)) for m in glyphs])


def _base_image(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2
    inside = ((xx - c) / (0.42 * size)) ** 2 + ((yy - c) / (0.30 * size)) ** 2 <= 1.0
    img = np.full((size, size, 3), 0.45)
    img[inside] = (0.58, 0.55, 0.50)
    return img


def _render(spec: SynthSpec, glyphs: np.ndarray, label: int, rng: np.random.Generator):
    s, g, d = spec.image_size, spec.glyph_size, spec.clutter_density
    img = _base_image(s)
    if d > 0:
        for _ in range(int(round(14 * d))):
            w, h = rng.integers(3, 11, size=2)
            x, y = rng.integers(0, s - w + 1), rng.integers(0, s - h + 1)
            img[y : y + h, x : x + w] = rng.uniform(0.25, 0.75, size=3)
        img += rng.normal(0.0, 0.06 * d, size=img.shape)
        img = np.clip(img, 0.2, 0.8)
    x0 = int(rng.integers(1, s - g))
    y0 = int(rng.integers(1, s - g))
    on = np.clip(ON_LEVEL + rng.uniform(-JITTER, JITTER, size=3), 0, 1)
    off = np.clip(OFF_LEVEL + rng.uniform(-JITTER, JITTER, size=3), 0, 1)
    bitmap = glyphs[label].astype(bool)[:, :, None]
    img[y0 : y0 + g, x0 : x0 + g] = np.where(bitmap, on, off)
    img = np.round(img * 255.0) / 255.0
    return img.astype(np.float32), (x0, y0, x0 + g, y0 + g)


def _split(spec: SynthSpec, glyphs, split_id: int, count: int) -> Dataset:
    images = np.empty((count, spec.image_size, spec.image_size, 3), dtype=np.float32)
    labels = np.arange(count, dtype=np.int64) % spec.num_classes
    boxes = np.empty((count, 4), dtype=np.int64)
    for i in range(count):
        rng = np.random.default_rng([spec.seed, split_id, i])
        images[i], boxes[i] = _render(spec, glyphs, int(labels[i]), rng)
    return Dataset(images, labels, boxes)


def generate(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """(train, test) as a pure function of ``spec``."""
    glyphs = class_glyphs(spec)
    return _split(spec, glyphs, 1, spec.train_count), _split(spec, glyphs, 2, spec.test_count)


def localization_iou(region, box) -> float:
    """IoU of two half-open (x0, y0, x1, y1) rectangles."""
    ax0, ay0, ax1, ay1 = _box(region)
    bx0, by0, bx1, by1 = _box(box)
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _box(b) -> tuple[int, int, int, int]:
    if hasattr(b, "x0"):
        return b.x0, b.y0, b.x1, b.y1
    x0, y0, x1, y1 = (int(v) for v in b)
    return x0, y0, x1, y1


# ---------------------------------------------------------------- PPM
class PPMError(ValueError):
    pass


_HEADER_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def write_ppm(img, path: str | Path) -> None:
    """Binary P6, maxval 255. Float input is read as [0, 1]; uint8 is written as is."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PPMError(f"expected (H, W, 3) image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm_bytes(path: str | Path) -> np.ndarray:
    """Raw uint8 (H, W, 3) pixels of a P6 file."""
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(buf, pos)
        if m is None:
            raise PPMError("malformed PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise PPMError(f"unsupported magic {tokens[0]!r}; only binary P6 is read")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PPMError("non-numeric PPM header field") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise PPMError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError("missing whitespace after PPM header")
    pos += 1
    payload = buf[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise PPMError(f"truncated PPM payload: {len(payload)} of {w * h * 3} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path: str | Path) -> np.ndarray:
    """Float32 (H, W, 3) image in [0, 1]."""
    return read_ppm_bytes(path).astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- directory layout
def save_dataset(root: str | Path, train: Dataset, test: Dataset) -> None:
    """``root/{train,test}/<label>/<index>.ppm`` plus ``boxes.tsv``."""
    root = Path(root)
    rows = ["split\tlabel\tindex\tx0\ty0\tx1\ty1"]
    for split, ds in (("train", train), ("test", test)):
        for i in range(len(ds)):
            label = int(ds.labels[i])
            d = root / split / str(label)
            d.mkdir(parents=True, exist_ok=True)
            write_ppm(ds.images[i], d / f"{i}.ppm")
            if ds.boxes is not None:
                rows.append("\t".join([split, str(label), str(i), *(str(int(v)) for v in ds.boxes[i])]))
    if train.boxes is not None or test.boxes is not None:
        (root / "boxes.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_split(root: str | Path, split: str) -> Dataset:
    root = Path(root)
    base = root / split
    if not base.is_dir():
        raise FileNotFoundError(f"missing split directory {base}")
    entries = []
    for label_dir in base.iterdir():
        if not label_dir.is_dir():
            continue
        if not label_dir.name.isdigit():
            raise ValueError(f"label directory {label_dir} is not a non-negative integer")
        for f in label_dir.glob("*.ppm"):
            if not f.stem.isdigit():
                raise ValueError(f"image file {f} is not named <index>.ppm")
            entries.append((int(f.stem), int(label_dir.name), f))
    if not entries:
        raise ValueError(f"no images under {base}")
    entries.sort()
    images = np.stack([read_ppm(f) for _, _, f in entries])
    labels = np.array([lab for _, lab, _ in entries], dtype=np.int64)
    boxes = None
    box_file = root / "boxes.tsv"
    if box_file.exists():
        table = {}
        for line in box_file.read_text(encoding="utf-8").splitlines()[1:]:
            if not line.strip():
                continue
            sp, lab, idx, *coords = line.split("\t")
            if sp == split:
                table[int(idx)] = [int(c) for c in coords]
        if all(i in table for i, _, _ in entries):
            boxes = np.array([table[i] for i, _, _ in entries], dtype=np.int64)
    return Dataset(images, labels, boxes)


def load_dataset(root: str | Path) -> tuple[Dataset, Dataset]:
    return load_split(root, "train"), load_split(root, "test")


def read_kv_file(path: str | Path) -> dict[str, str]:
    """UTF-8 ``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
