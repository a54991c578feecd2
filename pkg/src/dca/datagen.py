"""Synthetic detection corpus and the class-incremental phase protocol.

Classes are (color, shape) pairs so class names carry compositional semantics
("red circle", "blue cross", ...). Images are filled geometric shapes on a
noisy gray background with boxes fitted tightly around the drawn pixels.
Generation is a pure function of the corpus spec, so identical specs produce
byte-identical corpora on disk.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BoxError, ConfigurationError, FormatError, ProtocolError

BOX_EDGE_TOLERANCE = 0.01

SHAPE_NAMES = ("circle", "square", "triangle", "cross")
COLOR_TABLE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.55, 0.15, 0.85),
    "teal": (0.05, 0.50, 0.50),
    "pink": (0.98, 0.60, 0.75),
}


def _word_seed(word: str) -> list[int]:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class BoxAnnotation:
    """One object: class id plus a normalized (cx, cy, w, h) box."""

    class_id: int
    box: tuple[float, float, float, float]

    def validate(self) -> None:
        cx, cy, w, h = self.box
        if w <= 0 or h <= 0:
            raise BoxError(f"non-positive box size {self.box}")
        lo, hi = -BOX_EDGE_TOLERANCE, 1.0 + BOX_EDGE_TOLERANCE
        for edge in (cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2):
            if edge < lo or edge > hi:
                raise BoxError(f"box {self.box} exceeds the unit square")


@dataclass
class DetectionSample:
    sample_id: int
    image: np.ndarray  # (H, W, 3) float64 in [0, 1], quantized to the 8-bit grid
    annotations: list[BoxAnnotation]


@dataclass
class Corpus:
    taxonomy: list[str]
    samples: list[DetectionSample]
    image_size: int

    @property
    def num_classes(self) -> int:
        return len(self.taxonomy)

    def class_counts(self) -> np.ndarray:
        """Number of samples each class appears in (distinct samples)."""
        counts = np.zeros(len(self.taxonomy), dtype=np.int64)
        for sample in self.samples:
            for cid in {ann.class_id for ann in sample.annotations}:
                counts[cid] += 1
        return counts


@dataclass
class IncrementalProtocol:
    taxonomy: list[str]
    phases: list[list[int]]

    @property
    def num_phases(self) -> int:
        return len(self.phases)

    def visible_classes(self, t: int) -> list[int]:
        """All class ids seen up to and including phase t (1-based)."""
        self._check_phase(t)
        out: list[int] = []
        for phase in self.phases[:t]:
            out.extend(phase)
        return out

    def future_classes(self, t: int) -> list[int]:
        self._check_phase(t)
        out: list[int] = []
        for phase in self.phases[t:]:
            out.extend(phase)
        return out

    def _check_phase(self, t: int) -> None:
        if not 1 <= t <= len(self.phases):
            raise ProtocolError(f"phase index {t} outside 1..{len(self.phases)}")


@dataclass
class PhaseDataset:
    phase_index: int
    samples: list[DetectionSample]
    phase_class_ids: list[int]
    visible_class_ids: list[int]


@dataclass
class CorpusSpec:
    n_samples: int
    image_size: int = 64
    shapes: tuple[str, ...] = SHAPE_NAMES
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "magenta")
    max_objects: int = 6
    noise: float = 0.1  # background intensity half-range around mid-gray
    seed: int = 0

    def taxonomy(self) -> list[str]:
        return [f"{color} {shape}" for shape in self.shapes for color in self.colors]


def parse_class_grid(text: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Parse "SxC" (shapes x colors) into name tuples, e.g. "4x5"."""
    try:
        n_shapes, n_colors = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigurationError(f"bad class grid {text!r}, expected e.g. 4x5") from exc
    if n_shapes < 1 or n_shapes > len(SHAPE_NAMES):
        raise ConfigurationError(f"shape count must be in 1..{len(SHAPE_NAMES)}")
    colors = tuple(COLOR_TABLE)
    if n_colors < 1 or n_colors > len(colors):
        raise ConfigurationError(f"color count must be in 1..{len(colors)}")
    return SHAPE_NAMES[:n_shapes], colors[:n_colors]


# -- generation -----------------------------------------------------------


def _validate_spec(spec: CorpusSpec) -> None:
    n_classes = len(spec.shapes) * len(spec.colors)
    if n_classes < 2:
        raise ConfigurationError("need at least 2 classes (shapes x colors)")
    if spec.n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if spec.max_objects < 1:
        raise ConfigurationError("max_objects must be >= 1")
    if spec.image_size < 16 or spec.image_size % 8 != 0:
        raise ConfigurationError("image_size must be >= 16 and divisible by 8")
    min_size = _size_range(spec.image_size)[0]
    capacity = (spec.image_size // (min_size + 2)) ** 2
    if spec.max_objects > capacity:
        raise ConfigurationError(
            f"image of {spec.image_size}px cannot hold {spec.max_objects} objects")
    for color in spec.colors:
        if color not in COLOR_TABLE:
            raise ConfigurationError(f"unknown color {color!r}")
    for shape in spec.shapes:
        if shape not in SHAPE_NAMES:
            raise ConfigurationError(f"unknown shape {shape!r}")


def _size_range(image_size: int) -> tuple[int, int]:
    # lower bound keeps every shape at least ~1.5 feature tokens wide
    return max(10, image_size // 4), max(14, image_size * 9 // 20)


def _assign_classes(spec: CorpusSpec, rng: np.random.Generator) -> list[list[int]]:
    """Pick per-sample class lists so every class lands in enough samples.

    Guarantee: each class appears in at least ceil(n / (4K)) distinct samples;
    remaining object slots are filled uniformly at random.
    """
    n, k = spec.n_samples, len(spec.shapes) * len(spec.colors)
    quota = max(1, math.ceil(n / (4 * k)))
    per_sample: list[list[int]] = [[] for _ in range(n)]
    order = rng.permutation(n)
    cursor = 0
    for _ in range(quota):
        for cid in range(k):
            placed = False
            for step in range(n):
                s = int(order[(cursor + step) % n])
                if len(per_sample[s]) < spec.max_objects and cid not in per_sample[s]:
                    per_sample[s].append(cid)
                    cursor = (cursor + step + 1) % n
                    placed = True
                    break
            if not placed:
                raise ConfigurationError(
                    "corpus too small to give every class its minimum appearances")
    target_counts = rng.integers(1, spec.max_objects + 1, size=n)
    for s in range(n):
        while len(per_sample[s]) < target_counts[s]:
            per_sample[s].append(int(rng.integers(0, k)))
        rng.shuffle(per_sample[s])
    return per_sample


def _shape_mask(shape: str, size_px: int, aspect: float, grid: tuple[np.ndarray, np.ndarray],
                cx: float, cy: float) -> np.ndarray:
    ys, xs = grid
    half_w = size_px / 2.0
    half_h = size_px * aspect / 2.0
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return (dx / half_w) ** 2 + (dy / half_h) ** 2 <= 1.0
    if shape == "square":
        return (np.abs(dx) <= half_w) & (np.abs(dy) <= half_h)
    if shape == "triangle":
        inside_y = (dy >= -half_h) & (dy <= half_h)
        width_at = (dy + half_h) / (2.0 * half_h) * half_w
        return inside_y & (np.abs(dx) <= width_at)
    if shape == "cross":
        bar = max(1.0, size_px / 3.0) / 2.0
        horiz = (np.abs(dy) <= bar) & (np.abs(dx) <= half_w)
        vert = (np.abs(dx) <= bar) & (np.abs(dy) <= half_h)
        return horiz | vert
    raise ConfigurationError(f"unknown shape {shape!r}")


def _render_sample(spec: CorpusSpec, sample_id: int, class_ids: list[int],
                   taxonomy: list[str]) -> DetectionSample:
    rng = np.random.default_rng([spec.seed, 1000003, sample_id])
    side = spec.image_size
    image = 0.5 + 2.0 * spec.noise * (rng.random((side, side, 3)) - 0.5)
    grid = np.ogrid[0:side, 0:side]
    smin, smax = _size_range(side)
    annotations: list[BoxAnnotation] = []
    placed: list[tuple[float, float, float, float]] = []

    for cid in class_ids:
        color_name, shape_name = taxonomy[cid].split(" ", 1)
        best = None
        for _ in range(40):
            size_px = float(rng.uniform(smin, smax))
            aspect = float(rng.uniform(0.8, 1.25))
            margin = size_px * max(1.0, aspect) / 2.0 + 1.0
            cx = float(rng.uniform(margin, side - margin))
            cy = float(rng.uniform(margin, side - margin))
            cand = (cx, cy, size_px, size_px * aspect)
            worst = max((_overlap(cand, p) for p in placed), default=0.0)
            if best is None or worst < best[0]:
                best = (worst, size_px, aspect, cx, cy)
            if worst <= 0.2:
                break
        _, size_px, aspect, cx, cy = best
        mask = _shape_mask(shape_name, size_px, aspect, grid, cx, cy)
        if not mask.any():
            continue
        brightness = float(rng.uniform(0.8, 1.0))
        color = np.array(COLOR_TABLE[color_name]) * brightness
        image[mask] = color
        ys, xs = np.nonzero(mask)
        x1, x2 = xs.min(), xs.max()
        y1, y2 = ys.min(), ys.max()
        box = ((x1 + x2 + 1) / 2.0 / side, (y1 + y2 + 1) / 2.0 / side,
               (x2 - x1 + 1) / side, (y2 - y1 + 1) / side)
        placed.append((cx, cy, size_px, size_px * aspect))
        ann = BoxAnnotation(class_id=cid, box=box)
        ann.validate()
        annotations.append(ann)

    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return DetectionSample(sample_id=sample_id,
                           image=quantized.astype(np.float64) / 255.0,
                           annotations=annotations)


def _overlap(a: tuple, b: tuple) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
    iy = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically render a corpus from its spec."""
    _validate_spec(spec)
    taxonomy = spec.taxonomy()
    rng = np.random.default_rng([spec.seed, 7])
    per_sample = _assign_classes(spec, rng)
    samples = [_render_sample(spec, sid, classes, taxonomy)
               for sid, classes in enumerate(per_sample)]
    return Corpus(taxonomy=taxonomy, samples=samples, image_size=spec.image_size)


# -- incremental protocol ---------------------------------------------------


def build_protocol(taxonomy: list[str], split_sizes: list[int]) -> IncrementalProtocol:
    """Partition the taxonomy, in order, into consecutive phase class groups."""
    if any(s < 1 for s in split_sizes):
        raise ProtocolError("every split size must be >= 1")
    if sum(split_sizes) != len(taxonomy):
        raise ProtocolError(
            f"split sizes {split_sizes} do not sum to {len(taxonomy)} classes")
    phases, start = [], 0
    for size in split_sizes:
        phases.append(list(range(start, start + size)))
        start += size
    return IncrementalProtocol(taxonomy=list(taxonomy), phases=phases)


def check_protocol(protocol: IncrementalProtocol) -> None:
    """Assert disjointness and exact coverage of the taxonomy."""
    seen: set[int] = set()
    for phase in protocol.phases:
        if not phase:
            raise ProtocolError("empty phase")
        ids = set(phase)
        if ids & seen:
            raise ProtocolError(f"classes {sorted(ids & seen)} appear in two phases")
        seen |= ids
    if seen != set(range(len(protocol.taxonomy))):
        raise ProtocolError("phases do not cover the taxonomy exactly")


def _filtered_samples(corpus: Corpus, keep: set[int]) -> list[DetectionSample]:
    out = []
    for sample in corpus.samples:
        kept = [ann for ann in sample.annotations if ann.class_id in keep]
        if kept:
            out.append(DetectionSample(sample.sample_id, sample.image, kept))
    return out


def phase_view(corpus: Corpus, protocol: IncrementalProtocol, t: int) -> PhaseDataset:
    """Training view for phase t: only annotations of C_t survive.

    Images that contain exclusively other-phase objects are dropped entirely
    rather than kept as empty negatives.
    """
    protocol._check_phase(t)
    phase_ids = protocol.phases[t - 1]
    return PhaseDataset(
        phase_index=t,
        samples=_filtered_samples(corpus, set(phase_ids)),
        phase_class_ids=list(phase_ids),
        visible_class_ids=protocol.visible_classes(t),
    )


def visible_view(corpus: Corpus, protocol: IncrementalProtocol, t: int) -> PhaseDataset:
    """Evaluation view for phase t: full annotations over every seen class."""
    protocol._check_phase(t)
    visible = protocol.visible_classes(t)
    return PhaseDataset(
        phase_index=t,
        samples=_filtered_samples(corpus, set(visible)),
        phase_class_ids=list(protocol.phases[t - 1]),
        visible_class_ids=visible,
    )


# -- disk format ------------------------------------------------------------


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for sample in corpus.samples:
        filename = f"{sample.sample_id}.png"
        img = np.round(sample.image * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(directory / "images" / filename)
        records.append({
            "id": sample.sample_id,
            "file": f"images/{filename}",
            "boxes": [[round(v, 6) for v in ann.box] for ann in sample.annotations],
            "classes": [ann.class_id for ann in sample.annotations],
        })
    payload = {"taxonomy": corpus.taxonomy, "samples": records}
    (directory / "annotations.json").write_text(json.dumps(payload, indent=1))


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    path = directory / "annotations.json"
    if not path.exists():
        raise FormatError(f"no annotations.json under {directory}")
    payload = json.loads(path.read_text())
    if "taxonomy" not in payload or "samples" not in payload:
        raise FormatError("annotations.json must carry 'taxonomy' and 'samples'")
    samples = []
    image_size = 0
    for rec in payload["samples"]:
        img = np.asarray(Image.open(directory / rec["file"]).convert("RGB"),
                         dtype=np.float64) / 255.0
        image_size = img.shape[0]
        anns = [BoxAnnotation(class_id=int(c), box=tuple(b))
                for c, b in zip(rec["classes"], rec["boxes"])]
        samples.append(DetectionSample(int(rec["id"]), img, anns))
    return Corpus(taxonomy=list(payload["taxonomy"]), samples=samples,
                  image_size=image_size)


def save_protocol(protocol: IncrementalProtocol, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"phases": protocol.phases}, indent=1))


def load_protocol(path: str | Path, taxonomy: list[str]) -> IncrementalProtocol:
    payload = json.loads(Path(path).read_text())
    if "phases" not in payload:
        raise FormatError("protocol file must carry a 'phases' list")
    protocol = IncrementalProtocol(taxonomy=list(taxonomy),
                                   phases=[[int(c) for c in p] for p in payload["phases"]])
    check_protocol(protocol)
    return protocol
