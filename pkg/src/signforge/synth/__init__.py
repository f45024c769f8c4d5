"""Differentiable synthesis of traffic-sign datasets from a standard."""

from signforge.synth.augment import AUGMENTATION_IDS, AugmentationChain, apply_chain, sample_chain
from signforge.synth.dataset import (
    DatasetManifest,
    MaterializedDataset,
    SignDataset,
    SynthConfig,
    SynthError,
    expected_counts,
    instantiate,
)
from signforge.synth.render import embed_in_scene, render_sign
from signforge.synth.scenes import ContextScene, generate_scenes, load_scenes, save_scenes

__all__ = [
    "AUGMENTATION_IDS",
    "AugmentationChain",
    "ContextScene",
    "DatasetManifest",
    "MaterializedDataset",
    "SignDataset",
    "SynthConfig",
    "SynthError",
    "apply_chain",
    "embed_in_scene",
    "expected_counts",
    "generate_scenes",
    "instantiate",
    "load_scenes",
    "render_sign",
    "sample_chain",
    "save_scenes",
]
