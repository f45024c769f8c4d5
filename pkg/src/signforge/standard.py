"""Traffic-sign standards: data model, built-in library and persistence.

A standard is an ordered set of sign classes. Each class has a border shape,
a pictogram (an alpha mask) and a uniform pictogram color. All mutators return
new objects; nothing in here modifies its inputs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from signforge import pictograms

SHAPES = ("prohibitory_circle", "warning_triangle")
MAX_MASK_SIZE = 256


class StandardError(ValueError):
    pass


@dataclass(frozen=True)
class RgbColor:
    r: float
    g: float
    b: float

    @classmethod
    def clipped(cls, rgb: Sequence[float]) -> "RgbColor":
        r, g, b = (float(min(max(c, 0.0), 1.0)) for c in rgb)
        return cls(r, g, b)

    def __post_init__(self):
        for c in (self.r, self.g, self.b):
            if not 0.0 <= c <= 1.0:
                raise StandardError(f"color channel {c} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.r, self.g, self.b)


BLACK = RgbColor(0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class Pictogram:
    id: str
    alpha_mask: np.ndarray
    display_name: str = ""
    source: str = "builtin"

    def __post_init__(self):
        m = np.asarray(self.alpha_mask, dtype=np.float64)
        if m.ndim != 2 or min(m.shape) < 1 or max(m.shape) > MAX_MASK_SIZE:
            raise StandardError(f"pictogram {self.id!r}: bad mask shape {m.shape}")
        if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
            raise StandardError(f"pictogram {self.id!r}: mask values outside [0, 1]")
        if self.source not in ("builtin", "file"):
            raise StandardError(f"pictogram {self.id!r}: unknown source {self.source!r}")
        m.setflags(write=False)
        object.__setattr__(self, "alpha_mask", m)

    def __eq__(self, other):
        if not isinstance(other, Pictogram):
            return NotImplemented
        return (
            self.id == other.id
            and self.display_name == other.display_name
            and self.source == other.source
            and self.alpha_mask.shape == other.alpha_mask.shape
            and bool(np.array_equal(self.alpha_mask, other.alpha_mask))
        )

    __hash__ = None


@dataclass(frozen=True)
class SignClass:
    class_id: int
    shape: str
    pictogram: Pictogram
    color: RgbColor = BLACK
    name: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise StandardError(f"unknown sign shape {self.shape!r}")


@dataclass(frozen=True)
class TrafficSignStandard:
    classes: tuple[SignClass, ...]
    name: str = "standard"
    version: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise StandardError(f"duplicate class id {dup[0]}")
        if ids != list(range(1, len(ids) + 1)):
            raise StandardError(f"class ids must be contiguous 1..n in order, got {ids}")

    @property
    def n(self) -> int:
        return len(self.classes)

    def __getitem__(self, class_id: int) -> SignClass:
        if not 1 <= class_id <= self.n:
            raise StandardError(f"unknown class id {class_id} (n={self.n})")
        return self.classes[class_id - 1]

    def colors(self) -> np.ndarray:
        """(n, 3) array of pictogram colors, row k is class k + 1."""
        return np.array([c.color.as_tuple() for c in self.classes], dtype=np.float64)

    def with_colors(self, colors) -> "TrafficSignStandard":
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != (self.n, 3):
            raise StandardError(f"expected ({self.n}, 3) colors, got {colors.shape}")
        classes = [dataclasses.replace(c, color=RgbColor.clipped(rgb)) for c, rgb in zip(self.classes, colors)]
        return dataclasses.replace(self, classes=tuple(classes))


@dataclass(frozen=True)
class PictogramPool:
    """Candidate pictograms per class; candidate indices are 1-based."""

    candidates: dict = field(default_factory=dict)

    def __post_init__(self):
        for cid, cands in self.candidates.items():
            if len(cands) < 1:
                raise StandardError(f"class {cid}: empty candidate pool")

    def __getitem__(self, class_id: int) -> list:
        return self.candidates[class_id]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.candidates

    def size(self, class_id: int) -> int:
        return len(self.candidates[class_id])


def set_color(standard: TrafficSignStandard, class_id: int, color) -> TrafficSignStandard:
    cls = standard[class_id]
    if isinstance(color, RgbColor):
        color = color.as_tuple()
    new = dataclasses.replace(cls, color=RgbColor.clipped(color))
    classes = list(standard.classes)
    classes[class_id - 1] = new
    return dataclasses.replace(standard, classes=tuple(classes))


def set_pictogram(
    standard: TrafficSignStandard, class_id: int, candidate_index: int, pool: PictogramPool
) -> TrafficSignStandard:
    cls = standard[class_id]
    if class_id not in pool:
        raise StandardError(f"class {class_id} absent from pool")
    m = pool.size(class_id)
    if not 1 <= candidate_index <= m:
        raise StandardError(f"candidate index {candidate_index} out of range [1, {m}]")
    new = dataclasses.replace(cls, pictogram=pool[class_id][candidate_index - 1])
    classes = list(standard.classes)
    classes[class_id - 1] = new
    return dataclasses.replace(standard, classes=tuple(classes))


def replace_pictogram(standard: TrafficSignStandard, class_id: int, pictogram: Pictogram) -> TrafficSignStandard:
    classes = list(standard.classes)
    classes[class_id - 1] = dataclasses.replace(standard[class_id], pictogram=pictogram)
    return dataclasses.replace(standard, classes=tuple(classes))


def _builtin_pictogram(spec: pictograms.BuiltinClass, variant: int) -> Pictogram:
    name = spec.display_name if variant == 0 else f"{spec.display_name} (alt {variant})"
    return Pictogram(f"{spec.key}_v{variant}", pictograms.draw_mask(spec.key, variant), name, "builtin")


def default_standard(n: int = 7) -> TrafficSignStandard:
    """The original standard: built-in pictograms (variant 0), all colors black."""
    if not 1 <= n <= len(pictograms.BUILTIN_CLASSES):
        raise StandardError(f"built-in library has {len(pictograms.BUILTIN_CLASSES)} classes, asked for {n}")
    classes = [
        SignClass(spec.class_id, spec.shape, _builtin_pictogram(spec, 0), BLACK, spec.key)
        for spec in pictograms.BUILTIN_CLASSES[:n]
    ]
    return TrafficSignStandard(tuple(classes), name="original", version="1")


def default_pool(n: int = 7, m: int = 5) -> PictogramPool:
    """Candidate pool of the ``m`` alternative drawings (variants 1..m) per class."""
    if not 1 <= m <= pictograms.N_VARIANTS - 1:
        raise StandardError(f"pool size must be in [1, {pictograms.N_VARIANTS - 1}]")
    return PictogramPool(
        {
            spec.class_id: [_builtin_pictogram(spec, v) for v in range(1, m + 1)]
            for spec in pictograms.BUILTIN_CLASSES[:n]
        }
    )


# -- persistence ---------------------------------------------------------------


def _write_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(mask * 255.0).astype(np.uint8), mode="L").save(path)


def _read_mask(path: Path) -> np.ndarray:
    if not path.exists():
        raise StandardError(f"mask file not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise StandardError(f"mask {path} is not single-channel")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    # 16-bit or float images are taken to be already normalized
    arr = arr.astype(np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise StandardError(f"mask {path}: values outside [0, 1]")
    return arr


def _quantize(mask: np.ndarray) -> np.ndarray:
    return np.round(mask * 255.0) / 255.0


def _picto_entry(p: Pictogram, mask_file: str) -> dict:
    return {"id": p.id, "mask_file": mask_file, "display_name": p.display_name, "source": p.source}


def _picto_from_entry(entry: dict, root: Path) -> Pictogram:
    try:
        return Pictogram(
            entry["id"],
            _read_mask(root / entry["mask_file"]),
            entry.get("display_name", ""),
            entry.get("source", "file"),
        )
    except KeyError as e:
        raise StandardError(f"malformed pictogram entry, missing {e}") from None


def quantized(standard: TrafficSignStandard) -> TrafficSignStandard:
    """The standard as it will read back from disk (masks at 8-bit precision)."""
    classes = []
    for c in standard.classes:
        p = c.pictogram
        classes.append(dataclasses.replace(c, pictogram=dataclasses.replace(p, alpha_mask=_quantize(p.alpha_mask))))
    return dataclasses.replace(standard, classes=tuple(classes))


def save_standard(standard: TrafficSignStandard, path) -> None:
    path = Path(path)
    root = path.parent
    mask_dir = root / "masks"
    try:
        mask_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(root, os.W_OK):
            raise PermissionError(f"directory not writable: {root}")
        entries = []
        for c in standard.classes:
            mask_file = f"masks/{c.pictogram.id}.png"
            _write_mask(c.pictogram.alpha_mask, root / mask_file)
            entries.append(
                {
                    "class_id": c.class_id,
                    "name": c.name,
                    "shape": c.shape,
                    "pictogram": _picto_entry(c.pictogram, mask_file),
                    "color": [float(v) for v in c.color.as_tuple()],
                }
            )
        doc = {"name": standard.name, "version": standard.version, "classes": entries}
        # repr-precision floats: colors round-trip exactly
        path.write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as e:
        raise StandardError(f"cannot write standard to {path}: {e}") from e


def load_standard(path) -> TrafficSignStandard:
    path = Path(path)
    if not path.exists():
        raise StandardError(f"standard manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        classes = []
        for e in doc["classes"]:
            color = e.get("color", [0.0, 0.0, 0.0])
            if len(color) != 3:
                raise StandardError(f"class {e['class_id']}: color must have 3 channels")
            classes.append(
                SignClass(
                    int(e["class_id"]),
                    e["shape"],
                    _picto_from_entry(e["pictogram"], path.parent),
                    RgbColor(*(float(v) for v in color)),
                    e.get("name", ""),
                )
            )
        ids = [c.class_id for c in classes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise StandardError(f"duplicate class id {dup[0]}")
        classes.sort(key=lambda c: c.class_id)
        return TrafficSignStandard(tuple(classes), doc.get("name", "standard"), str(doc.get("version", "1")))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise StandardError(f"malformed standard manifest {path}: {e}") from None


def save_pool(pool: PictogramPool, path) -> None:
    path = Path(path)
    mask_dir = path.parent / "pool_masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    doc = {}
    for cid in sorted(pool.candidates):
        entries = []
        for p in pool[cid]:
            mask_file = f"pool_masks/{p.id}.png"
            _write_mask(p.alpha_mask, path.parent / mask_file)
            entries.append(_picto_entry(p, mask_file))
        doc[str(cid)] = entries
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_pool(path) -> PictogramPool:
    path = Path(path)
    if not path.exists():
        raise StandardError(f"pool manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        return PictogramPool({int(k): [_picto_from_entry(e, path.parent) for e in v] for k, v in doc.items()})
    except (AttributeError, TypeError, ValueError) as e:
        if isinstance(e, StandardError):
            raise
        raise StandardError(f"malformed pool manifest {path}: {e}") from None
