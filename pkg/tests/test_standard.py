import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signforge.standard import (
    BLACK,
    Pictogram,
    PictogramPool,
    RgbColor,
    StandardError,
    TrafficSignStandard,
    default_pool,
    default_standard,
    load_pool,
    load_standard,
    quantized,
    save_pool,
    save_standard,
    set_color,
    set_pictogram,
)


def test_default_standard_has_seven_black_classes(standard):
    assert standard.n == 7
    assert [c.class_id for c in standard.classes] == list(range(1, 8))
    assert all(c.color == BLACK for c in standard.classes)
    assert [c.shape for c in standard.classes] == ["prohibitory_circle"] * 3 + ["warning_triangle"] * 4


def test_default_pool_has_five_distinct_candidates_per_class(standard, pool):
    for c in standard.classes:
        cands = pool[c.class_id]
        assert len(cands) == 5
        masks = [c.pictogram.alpha_mask] + [p.alpha_mask for p in cands]
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                assert not np.array_equal(masks[i], masks[j])


def test_duplicate_class_id_rejected(standard):
    classes = list(standard.classes)
    classes[3] = classes[2]
    with pytest.raises(StandardError, match="duplicate class id 3"):
        TrafficSignStandard(tuple(classes))


def test_load_rejects_duplicate_class_id(tmp_path, standard):
    save_standard(standard, tmp_path / "standard.json")
    doc = json.loads((tmp_path / "standard.json").read_text())
    doc["classes"][3]["class_id"] = 3
    (tmp_path / "standard.json").write_text(json.dumps(doc))
    with pytest.raises(StandardError, match="duplicate class id"):
        load_standard(tmp_path / "standard.json")


def test_load_errors(tmp_path):
    with pytest.raises(StandardError):
        load_standard(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(StandardError, match="malformed"):
        load_standard(tmp_path / "bad.json")


def test_save_load_round_trip(tmp_path, standard):
    s = set_color(standard, 2, (0.2786, 0.91, 0.0))
    save_standard(s, tmp_path / "standard.json")
    back = load_standard(tmp_path / "standard.json")
    assert back == quantized(s)
    assert np.abs(back.colors() - s.colors()).max() <= 1e-9
    text = (tmp_path / "standard.json").read_text()
    assert "0.2786" in text


def test_round_trip_is_exact_on_quantized_masks(tmp_path, standard):
    q = quantized(standard)
    save_standard(q, tmp_path / "s.json")
    back = load_standard(tmp_path / "s.json")
    for a, b in zip(q.classes, back.classes):
        assert np.array_equal(a.pictogram.alpha_mask, b.pictogram.alpha_mask)
    # builtin masks are already multiples of 1/255
    assert q == standard


def test_save_to_unwritable_path(tmp_path, standard):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StandardError):
        save_standard(standard, blocker / "standard.json")


def test_set_color_clips_and_is_idempotent(standard):
    s = set_color(standard, 2, (1.005, -0.003, 0.5))
    assert s[2].color.as_tuple() == (1.0, 0.0, 0.5)
    once = set_color(standard, 2, (0.5, 0.5, 0.5))
    assert set_color(once, 2, (0.5, 0.5, 0.5)) == once
    assert s[1] == standard[1]
    with pytest.raises(StandardError):
        set_color(standard, 9, (0, 0, 0))


def test_set_pictogram(standard, pool):
    s = set_pictogram(standard, 1, 3, pool)
    assert np.array_equal(s[1].pictogram.alpha_mask, pool[1][2].alpha_mask)
    with pytest.raises(StandardError):
        set_pictogram(standard, 1, 6, pool)
    with pytest.raises(StandardError):
        set_pictogram(standard, 1, 0, pool)
    restored = set_pictogram(s, 1, 1, PictogramPool({1: [standard[1].pictogram]}))
    assert restored == standard


def test_set_pictogram_class_absent_from_pool(standard):
    with pytest.raises(StandardError):
        set_pictogram(standard, 2, 1, PictogramPool({1: [standard[1].pictogram]}))


def test_pictogram_mask_validation():
    with pytest.raises(StandardError):
        Pictogram("bad", np.full((8, 8), 1.5))
    with pytest.raises(StandardError):
        Pictogram("bad", np.zeros((0, 8)))


def test_pool_round_trip(tmp_path, pool):
    save_pool(pool, tmp_path / "pool.json")
    back = load_pool(tmp_path / "pool.json")
    assert sorted(back.candidates) == sorted(pool.candidates)
    for cid in pool.candidates:
        for a, b in zip(pool[cid], back[cid]):
            assert np.array_equal(a.alpha_mask, b.alpha_mask)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 7),
    st.tuples(*[st.floats(-3, 3, allow_nan=False)] * 3),
)
def test_colors_always_in_unit_cube(class_id, rgb):
    s = set_color(default_standard(), class_id, rgb)
    cols = s.colors()
    assert (cols >= 0).all() and (cols <= 1).all()
    assert sorted(c.class_id for c in s.classes) == list(range(1, 8))
    assert s[class_id].color == RgbColor.clipped(rgb)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0, 1, allow_nan=False)] * 3), min_size=7, max_size=7))
def test_save_load_is_bijective_on_colors(tmp_path_factory, colors):
    d = tmp_path_factory.mktemp("std")
    s = default_standard().with_colors(np.array(colors))
    save_standard(s, d / "s.json")
    back = load_standard(d / "s.json")
    assert np.abs(back.colors() - s.colors()).max() <= 1e-9
    assert back == s


def test_default_pool_size_bounds():
    with pytest.raises(StandardError):
        default_pool(7, 6)
    assert default_pool(2, 1).size(2) == 1
