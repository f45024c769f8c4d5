"""The instantiation operator: from a standard to a labeled, split dataset.

:func:`instantiate` only decides *what* to generate (labels, scenes, flips,
augmentation chains, seeds, splits) and returns a :class:`DatasetManifest`.
Pixels are produced by :class:`SignDataset`, which binds a manifest to a
standard and renders lazily; rendering is a deterministic function of
(standard, scene, record), so lazy and materialized datasets agree exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from signforge.synth.augment import AugmentationChain, apply_chain, sample_chain
from signforge.synth.render import embed_in_scene, placed_mask, render_sign
from signforge.synth.scenes import SCENE_TYPES, SHAPE_TO_SCENE, ContextScene

SPLITS = ("train", "val", "test")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    scenes_per_type: int = 3
    augmented_per_base: int = 20
    test_scenes_per_type: int = 1
    val_fraction: float = 0.1
    image_size: int = 48
    master_seed: int = 0

    def __post_init__(self):
        if min(self.scenes_per_type, self.augmented_per_base, self.image_size) < 1 or self.test_scenes_per_type < 0:
            raise SynthError("synth counts must be positive")
        if self.test_scenes_per_type >= self.scenes_per_type:
            raise SynthError("test_scenes_per_type must be < scenes_per_type")
        if not 0.0 <= self.val_fraction < 1.0:
            raise SynthError("val_fraction must be in [0, 1)")

    @classmethod
    def paper_scale(cls, **overrides) -> "SynthConfig":
        """7 scenes per type, 225 augmentations per base image, 2 test scenes per type."""
        params = dict(scenes_per_type=7, augmented_per_base=225, test_scenes_per_type=2, val_fraction=0.033)
        params.update(overrides)
        return cls(**params)


def expected_counts(config: SynthConfig, n_classes: int) -> dict:
    """Closed-form split sizes, assuming every class has 2*scenes_per_type scene variants."""
    total = n_classes * 2 * config.scenes_per_type * config.augmented_per_base
    test = n_classes * 2 * config.test_scenes_per_type * config.augmented_per_base
    val = int(round(config.val_fraction * (total - test)))
    return {"base": n_classes * 2 * config.scenes_per_type, "total": total, "test": test, "val": val,
            "train": total - test - val}


@dataclass(frozen=True)
class SampleRecord:
    index: int
    label: int  # class id, 1..n
    scene_id: int
    flipped: bool
    chain: AugmentationChain
    sample_seed: int
    split: str

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "label": self.label,
            "scene_id": self.scene_id,
            "flipped": self.flipped,
            "chain": self.chain.to_json(),
            "sample_seed": self.sample_seed,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        return cls(d["index"], d["label"], d["scene_id"], d["flipped"], AugmentationChain.from_json(d["chain"]),
                   d["sample_seed"], d["split"])


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    seed: int
    config: SynthConfig
    n_classes: int
    test_scene_ids: tuple

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise SynthError(f"unknown split {name!r}")
        return np.array([r.index for r in self.records if r.split == name], dtype=np.int64)

    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] += 1
        out["total"] = len(self.records)
        out["base"] = len({(r.label, r.scene_id, r.flipped) for r in self.records})
        return out

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "config": dataclasses.asdict(self.config),
            "n_classes": self.n_classes,
            "test_scene_ids": list(self.test_scene_ids),
            "records": [r.to_json() for r in self.records],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(
            tuple(SampleRecord.from_json(r) for r in doc["records"]),
            doc["seed"],
            SynthConfig(**doc["config"]),
            doc["n_classes"],
            tuple(doc["test_scene_ids"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def sample_seed(master_seed: int, scene_id: int, flipped: bool, label: int, k: int) -> int:
    ss = np.random.SeedSequence([master_seed, scene_id, int(flipped), label, k])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _reserved_test_scenes(scenes, config: SynthConfig) -> tuple:
    reserved = []
    for t in SCENE_TYPES:
        ids = sorted({s.scene_id for s in scenes if s.scene_type == t})
        if not ids:
            continue
        if len(ids) <= config.test_scenes_per_type:
            raise SynthError(
                f"{len(ids)} {t} scenes cannot reserve {config.test_scenes_per_type} for testing and still train"
            )
        reserved.extend(ids[: config.test_scenes_per_type])
    return tuple(sorted(reserved))


def instantiate(standard, scenes, config: SynthConfig, seed: int | None = None) -> DatasetManifest:
    """Decide every sample of I(S): label, scene variant, chain, seed and split.

    For each class and each scene variant of the matching type (original and
    flipped), ``augmented_per_base`` samples are drawn. Samples in reserved
    scenes form the test split; a seeded ``val_fraction`` of the rest is val.
    """
    seed = config.master_seed if seed is None else seed
    types_needed = {SHAPE_TO_SCENE[c.shape] for c in standard.classes}
    present = {s.scene_type for s in scenes}
    if not types_needed <= present:
        raise SynthError(f"scenes do not cover types {sorted(types_needed - present)}")
    reserved = set(_reserved_test_scenes(scenes, config))
    records = []
    for cls in standard.classes:
        stype = SHAPE_TO_SCENE[cls.shape]
        for scene in scenes:
            if scene.scene_type != stype:
                continue
            split = "test" if scene.scene_id in reserved else "train"
            for k in range(config.augmented_per_base):
                s = sample_seed(seed, scene.scene_id, scene.flipped, cls.class_id, k)
                chain = sample_chain(np.random.default_rng(s))
                records.append([cls.class_id, scene.scene_id, scene.flipped, chain, s, split])
    non_test = [i for i, r in enumerate(records) if r[5] != "test"]
    n_val = int(round(config.val_fraction * len(non_test)))
    perm = np.random.default_rng([seed, 0x7A1]).permutation(len(non_test))
    for j in perm[:n_val]:
        records[non_test[j]][5] = "val"
    recs = tuple(SampleRecord(i, *r) for i, r in enumerate(records))
    return DatasetManifest(recs, seed, config, standard.n, tuple(sorted(reserved)))


class SignDataset:
    """A manifest bound to a standard and its scenes; renders images on demand."""

    def __init__(self, standard, scenes, manifest: DatasetManifest):
        self.standard = standard
        self.manifest = manifest
        self.scenes = {s.key: s for s in scenes}
        self.image_size = manifest.config.image_size
        self._masks = None
        self._bases: dict = {}
        self._tensors: dict = {}

    def __len__(self):
        return len(self.manifest.records)

    def with_standard(self, standard) -> "SignDataset":
        """Same samples rendered from another standard (same class structure)."""
        if standard.n != self.standard.n:
            raise SynthError("standard has a different number of classes")
        ds = SignDataset(standard, [], self.manifest)
        ds.scenes = self.scenes
        same_masks = all(
            a.pictogram is b.pictogram for a, b in zip(standard.classes, self.standard.classes)
        )
        if same_masks:
            ds._masks = self._masks
        return ds

    def split(self, name: str) -> np.ndarray:
        return self.manifest.split(name)

    def labels(self, indices) -> torch.Tensor:
        """Zero-based labels (class id - 1) for the model."""
        return torch.tensor([self.manifest.records[i].label - 1 for i in indices], dtype=torch.long)

    def _placed_masks(self):
        if self._masks is None:
            self._masks = [
                placed_mask(c.pictogram.alpha_mask, c.shape, self.image_size) for c in self.standard.classes
            ]
        return self._masks

    def _base(self, label: int, scene_key, colors=None, faces=None):
        scene = self.scenes[scene_key]
        cls = self.standard[label]
        if colors is None:
            key = (label, scene_key)
            if key not in self._bases:
                face, alpha = render_sign(cls, self.image_size, mask=self._placed_masks()[label - 1])
                self._bases[key] = embed_in_scene(scene, face, alpha, cls.shape)
            return self._bases[key]
        if label not in faces:
            faces[label] = render_sign(cls, self.image_size, colors[label - 1], self._placed_masks()[label - 1])
        face, alpha = faces[label]
        return embed_in_scene(scene, face, alpha, cls.shape)

    def render(self, indices, colors: torch.Tensor | None = None) -> torch.Tensor:
        """Render samples as a (B, 3, H, W) batch.

        :param colors: optional (n, 3) color tensor replacing the standard's
            colors; gradients of the output flow back into it.
        """
        faces: dict = {}
        out = []
        for i in indices:
            r = self.manifest.records[int(i)]
            base = self._base(r.label, (r.scene_id, r.flipped), colors, faces)
            out.append(apply_chain(base, r.chain))
        return torch.stack(out)

    def tensors(self, split: str, cap: int | None = None):
        """Materialized (images, zero-based labels) for a split, cached."""
        key = (split, cap)
        if key not in self._tensors:
            idx = self.split(split)
            if cap is not None:
                idx = idx[:cap]
            with torch.no_grad():
                self._tensors[key] = (self.render(idx), self.labels(idx))
        return self._tensors[key]

    def materialize(self, out_dir, png: bool = True) -> None:
        """Write manifest.json, images.npy (exact float32 pixels) and PNG previews."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest.save(out_dir / "manifest.json")
        with torch.no_grad():
            imgs = torch.cat([self.render(range(k, min(k + 256, len(self)))) for k in range(0, len(self), 256)])
        np.save(out_dir / "images.npy", imgs.numpy().astype(np.float32))
        if png:
            (out_dir / "images").mkdir(exist_ok=True)
            arr = (imgs.permute(0, 2, 3, 1).numpy() * 255).round().astype(np.uint8)
            for r, a in zip(self.manifest.records, arr):
                Image.fromarray(a).save(out_dir / "images" / f"{r.index:06d}.png")


class MaterializedDataset:
    """A dataset loaded from :meth:`SignDataset.materialize` output."""

    def __init__(self, root):
        root = Path(root)
        self.manifest = DatasetManifest.load(root / "manifest.json")
        self.images = torch.from_numpy(np.load(root / "images.npy"))
        self._labels = torch.tensor([r.label - 1 for r in self.manifest.records], dtype=torch.long)

    def __len__(self):
        return len(self.manifest.records)

    def split(self, name: str) -> np.ndarray:
        return self.manifest.split(name)

    def labels(self, indices) -> torch.Tensor:
        return self._labels[torch.as_tensor(np.asarray(indices), dtype=torch.long)]

    def render(self, indices, colors=None) -> torch.Tensor:
        if colors is not None:
            raise SynthError("materialized datasets are not differentiable in colors")
        return self.images[torch.as_tensor(np.asarray(indices), dtype=torch.long)]

    def tensors(self, split: str, cap: int | None = None):
        idx = self.split(split)
        if cap is not None:
            idx = idx[:cap]
        return self.render(idx), self.labels(idx)
