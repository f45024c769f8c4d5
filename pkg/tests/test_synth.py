import numpy as np
import pytest
import torch
from scipy import stats

from _oracles import color_grad_check, full_chain, pipeline_fn, rel_error, unsaturated
from signforge.standard import BLACK, Pictogram, SignClass
from signforge.synth import (
    AUGMENTATION_IDS,
    AugmentationChain,
    ContextScene,
    DatasetManifest,
    MaterializedDataset,
    SignDataset,
    SynthConfig,
    SynthError,
    apply_chain,
    embed_in_scene,
    expected_counts,
    generate_scenes,
    instantiate,
    load_scenes,
    render_sign,
    sample_chain,
    save_scenes,
)
from signforge.synth.augment import MAX_CHAIN, REGISTRY, AugmentationError
from signforge.synth.geometry import is_convex
from signforge.synth.render import RenderError, placed_mask


# -- scenes ----------------------------------------------------------------------


@pytest.mark.parametrize("spt,expected", [(1, 4), (7, 28)])
def test_scene_variant_counts(spt, expected):
    scenes = generate_scenes(SynthConfig(scenes_per_type=spt, test_scenes_per_type=0, image_size=24), 0)
    assert len(scenes) == expected
    assert sum(s.flipped for s in scenes) == expected // 2
    assert sum(s.scene_type == "prohibitory" for s in scenes) == expected // 2


def test_scenes_deterministic_and_valid(tiny_cfg):
    a = generate_scenes(tiny_cfg, 3)
    b = generate_scenes(tiny_cfg, 3)
    for s, t in zip(a, b):
        assert np.array_equal(s.background, t.background)
        assert np.array_equal(s.placement_quad, t.placement_quad)
    c = generate_scenes(tiny_cfg, 4)
    assert not np.array_equal(a[0].background, c[0].background)
    size = tiny_cfg.image_size
    for s in a:
        assert is_convex(s.placement_quad)
        assert (s.placement_quad >= 0).all() and (s.placement_quad <= size).all()
        assert s.background.min() >= 0 and s.background.max() <= 1


def test_flip_mirrors_background(tiny_scenes):
    orig, flipped = tiny_scenes[0], tiny_scenes[1]
    assert flipped.flipped and flipped.scene_id == orig.scene_id
    assert np.array_equal(flipped.background, orig.background[:, ::-1])


def test_scene_save_load(tmp_path, tiny_scenes):
    save_scenes(tiny_scenes, tmp_path / "scenes.npz")
    back = load_scenes(tmp_path / "scenes.npz")
    assert [s.key for s in back] == [s.key for s in tiny_scenes]
    assert all(np.array_equal(a.background, b.background) for a, b in zip(back, tiny_scenes))


# -- rendering ---------------------------------------------------------------------


def _sign(mask, color=BLACK, shape="prohibitory_circle"):
    return SignClass(1, shape, Pictogram("test", np.asarray(mask, dtype=np.float64)), color)


def test_black_pictogram_pixels_are_black(standard):
    face, _ = render_sign(standard[1], 48)
    mask = torch.from_numpy(placed_mask(standard[1].pictogram.alpha_mask, "prohibitory_circle", 48))
    full = mask == 1
    assert full.any()
    assert (face[:, full] == 0).all()


def test_zero_mask_face_independent_of_color():
    sign = _sign(np.zeros((16, 16)))
    c = torch.tensor([0.3, 0.6, 0.9], dtype=torch.float64, requires_grad=True)
    face, _ = render_sign(sign, 32, c)
    face.sum().backward()
    assert torch.equal(c.grad, torch.zeros(3, dtype=torch.float64))
    other, _ = render_sign(sign, 32, torch.tensor([0.9, 0.1, 0.0], dtype=torch.float64))
    assert torch.equal(face.detach(), other)


def test_half_mask_fd_gradient():
    sign = _sign(np.full((16, 16), 0.5))
    m = placed_mask(sign.pictogram.alpha_mask, sign.shape, 32)
    i, j = np.argwhere(np.isclose(m, 0.5))[0]
    h = 1e-3

    def red_at(r):
        face, _ = render_sign(sign, 32, torch.tensor([r, 0.2, 0.2], dtype=torch.float64))
        return face[0, i, j].item()

    fd = (red_at(0.4 + h) - red_at(0.4 - h)) / (2 * h)
    assert abs(fd - 0.5) <= 1e-4


def test_face_gradient_equals_mask(standard):
    sign = standard[5]
    c = torch.tensor([0.2, 0.5, 0.7], dtype=torch.float64, requires_grad=True)
    face, _ = render_sign(sign, 32, c)
    face[1].sum().backward()
    m = placed_mask(sign.pictogram.alpha_mask, sign.shape, 32)
    assert c.grad[1].item() == pytest.approx(m.sum(), rel=1e-12)
    assert c.grad[0].item() == 0.0


def test_resolution_too_small(standard):
    with pytest.raises(RenderError):
        render_sign(standard[1], 15)


def test_identity_quad_equals_paste(standard):
    res = 32
    bg = np.random.default_rng(0).uniform(size=(res, res, 3)).astype(np.float32)
    quad = np.array([[0, 0], [res, 0], [res, res], [0, res]], dtype=np.float64)
    scene = ContextScene(0, bg, quad, "prohibitory")
    face, alpha = render_sign(standard[1], res, torch.tensor([0.1, 0.7, 0.3], dtype=torch.float64))
    out = embed_in_scene(scene, face, alpha, "prohibitory_circle")
    direct = torch.from_numpy(bg).double().permute(2, 0, 1) * (1 - alpha) + face * alpha
    assert (out - direct).abs().max().item() <= 1e-6


def test_shape_scene_mismatch(standard, tiny_scenes):
    warning = next(s for s in tiny_scenes if s.scene_type == "warning")
    face, alpha = render_sign(standard[1], 48)
    with pytest.raises(RenderError):
        embed_in_scene(warning, face, alpha, "prohibitory_circle")


def test_embedded_color_gradient_fd(standard, tiny_scenes):
    scene = next(s for s in tiny_scenes if s.scene_type == "warning")
    f = pipeline_fn(standard[4], scene, AugmentationChain(), 48)
    color = [0.3, 0.5, 0.6]
    base = f(torch.tensor(color, dtype=torch.float64))
    # a single pixel on the sign face
    face_px = torch.zeros_like(base)
    c, i, j = 0, *np.argwhere(
        (pipeline_fn(standard[4], scene, AugmentationChain(), 48)(torch.tensor([1.0, 0, 0], dtype=torch.float64))
         - base)[0].abs().numpy() > 0.1
    )[0]
    face_px[c, i, j] = 1.0
    a, n = color_grad_check(f, color, face_px)
    assert a[0] > 0.1
    assert rel_error(a, n) <= 1e-3


# -- augmentations -------------------------------------------------------------------


def test_fifteen_augmentations():
    assert len(AUGMENTATION_IDS) == 15
    assert "jpeg_like_smoothing" in AUGMENTATION_IDS and "vignette" in AUGMENTATION_IDS


def test_chain_length_bounds():
    rng = np.random.default_rng(0)
    lengths = [len(sample_chain(rng)) for _ in range(10_000)]
    assert min(lengths) == 1 and max(lengths) == MAX_CHAIN == 8
    for _ in range(200):
        ids = [name for name, _ in sample_chain(rng).ops]
        assert len(ids) == len(set(ids))


def test_chain_fixed_seed():
    assert sample_chain(np.random.default_rng(5)) == sample_chain(np.random.default_rng(5))


def test_op_distribution_uniform():
    rng = np.random.default_rng(1)
    counts = dict.fromkeys(AUGMENTATION_IDS, 0)
    for _ in range(100_000):
        for name, _ in sample_chain(rng).ops:
            counts[name] += 1
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_chain_validation():
    with pytest.raises(AugmentationError):
        AugmentationChain((("sharpen", (1.0,)),))
    with pytest.raises(AugmentationError):
        AugmentationChain(tuple(("darken", (0.5,)) for _ in range(9)))


def test_empty_chain_identity():
    img = torch.rand(3, 16, 16)
    assert torch.equal(apply_chain(img, AugmentationChain()), img)


def test_darken_constant():
    img = torch.full((3, 8, 8), 0.8, dtype=torch.float64)
    out = apply_chain(img, AugmentationChain((("darken", (0.5,)),)))
    assert torch.allclose(out, torch.full_like(img, 0.4), atol=1e-12)


@pytest.mark.parametrize("name", AUGMENTATION_IDS)
def test_each_op_in_range_and_differentiable(name):
    rng = np.random.default_rng(7)
    aug = REGISTRY[name]
    chain = AugmentationChain(((name, tuple(aug.sample(rng))),))
    img = torch.rand(3, 24, 24, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
    out = apply_chain(img, chain)
    assert out.min() >= 0 and out.max() <= 1
    out.sum().backward()
    assert torch.isfinite(img.grad).all()


def test_full_chain_pixel_fd(standard, tiny_scenes):
    rng = np.random.default_rng(11)
    scene = next(s for s in tiny_scenes if s.scene_type == "prohibitory")
    f = pipeline_fn(standard[2], scene, full_chain(rng), 48)
    color = [0.4, 0.3, 0.6]
    keep = unsaturated(f, color).numpy()
    sensitive = np.abs(
        (f(torch.tensor([0.9, 0.9, 0.9], dtype=torch.float64)) - f(torch.tensor(color, dtype=torch.float64))).numpy()
    ) > 1e-3
    cand = np.argwhere((keep > 0) & sensitive)
    assert len(cand) >= 10
    for c, i, j in cand[rng.choice(len(cand), 10, replace=False)]:
        w = torch.zeros(3, 48, 48, dtype=torch.float64)
        w[c, i, j] = 1
        a, n = color_grad_check(f, color, w)
        assert rel_error(a, n) < 1e-2


# -- instantiation -------------------------------------------------------------------------


def test_desk_counts(standard):
    cfg = SynthConfig(scenes_per_type=3, augmented_per_base=20, test_scenes_per_type=1)
    m = instantiate(standard, generate_scenes(cfg, 0), cfg, 0)
    counts = m.counts()
    assert counts["total"] == 7 * 2 * 3 * 20 == 840
    assert counts["test"] == 7 * 2 * 1 * 20 == 280
    assert counts["base"] == 42
    exp = expected_counts(cfg, 7)
    assert {k: counts[k] for k in exp} == exp


def test_paper_scale_counts():
    exp = expected_counts(SynthConfig.paper_scale(), 7)
    assert exp == {"base": 98, "total": 22050, "test": 6300, "train": 15230, "val": 520}


def test_split_partition(tiny_dataset):
    m = tiny_dataset.manifest
    reserved = set(m.test_scene_ids)
    for r in m.records:
        assert (r.split == "test") == (r.scene_id in reserved)
    idx = [set(m.split(s).tolist()) for s in ("train", "val", "test")]
    assert not (idx[0] & idx[1]) and not (idx[0] & idx[2]) and not (idx[1] & idx[2])
    assert len(idx[0] | idx[1] | idx[2]) == len(m.records)
    # labels balanced within each scene variant group
    for key in {(r.scene_id, r.flipped) for r in m.records}:
        labels = [r.label for r in m.records if (r.scene_id, r.flipped) == key]
        assert len(set(np.bincount(labels)[np.unique(labels)])) == 1


def test_manifest_deterministic(standard, tiny_scenes, tiny_cfg):
    a = instantiate(standard, tiny_scenes, tiny_cfg, 5).to_json()
    b = instantiate(standard, tiny_scenes, tiny_cfg, 5).to_json()
    assert a == b
    assert DatasetManifest.from_json(a).to_json() == a
    assert instantiate(standard, tiny_scenes, tiny_cfg, 6).to_json() != a


def test_insufficient_scenes(standard):
    cfg = SynthConfig(scenes_per_type=2, augmented_per_base=1, test_scenes_per_type=1)
    scenes = [s for s in generate_scenes(cfg, 0) if s.scene_id in (0, 2)]
    with pytest.raises(SynthError):
        instantiate(standard, scenes, cfg, 0)


def test_missing_scene_type(standard, tiny_scenes, tiny_cfg):
    with pytest.raises(SynthError):
        instantiate(standard, [s for s in tiny_scenes if s.scene_type == "warning"], tiny_cfg, 0)


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(scenes_per_type=2, test_scenes_per_type=2)
    with pytest.raises(SynthError):
        SynthConfig(augmented_per_base=0)


def test_rendered_range_and_lazy_equals_materialized(tmp_path, tiny_dataset):
    tiny_dataset.materialize(tmp_path / "ds", png=True)
    mat = MaterializedDataset(tmp_path / "ds")
    lazy = tiny_dataset.render(range(len(tiny_dataset)))
    assert lazy.min() >= 0 and lazy.max() <= 1
    assert torch.equal(mat.render(range(len(mat))), lazy)
    assert len(list((tmp_path / "ds" / "images").glob("*.png"))) == len(tiny_dataset)
    assert torch.equal(mat.labels([0, 1]), tiny_dataset.labels([0, 1]))


def test_record_order_independent(tiny_dataset):
    idx = [5, 1, 9]
    single = torch.stack([tiny_dataset.render([i])[0] for i in idx])
    assert torch.equal(tiny_dataset.render(idx), single)


def test_dataset_color_gradients_on_random_samples(tiny_dataset):
    rng = np.random.default_rng(3)
    n = tiny_dataset.standard.n
    picks = rng.choice(len(tiny_dataset), 20, replace=False)
    for i in picks:
        rec = tiny_dataset.manifest.records[int(i)]
        base = tiny_dataset.standard.colors()

        def f(color, rec=rec):
            cols = torch.tensor(base, dtype=torch.float64).clone()
            cols[rec.label - 1] = color
            return tiny_dataset.render([rec.index], cols)[0]

        color = rng.uniform(0.1, 0.9, 3)
        w = torch.from_numpy(rng.standard_normal((3, 48, 48))) * unsaturated(f, color)
        a, num = color_grad_check(f, color, w)
        assert rel_error(a, num) < 1e-2
    # colors of other classes do not influence the sample
    cols = torch.tensor(tiny_dataset.standard.colors(), dtype=torch.float64, requires_grad=True)
    tiny_dataset.render([0], cols).sum().backward()
    label = tiny_dataset.manifest.records[0].label
    others = [k for k in range(n) if k != label - 1]
    assert torch.equal(cols.grad[others], torch.zeros(len(others), 3, dtype=torch.float64))
