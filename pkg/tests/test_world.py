import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unidiff.errors import DatasetError, RenderError
from unidiff.oracle import chance_rate_mc
from unidiff.world import (COLORS, SHAPES, SceneSpec, WorldConfig, _cells, analytic_chance_rate, caption_scene,
                           caption_words, consistency_check, generate_dataset, load_dataset, parse_text, placements,
                           read_ppm, render, render_ppm, render_scene, render_text, save_dataset)

W = WorldConfig()
LAY = W.layout()


def test_vocabulary_sizes():
    assert LAY.sizes == (16, 12) and W.lengths == (64, 8)
    assert len(set(W.words)) == len(W.words)


def test_generated_pairs_are_consistent():
    records = generate_dataset(1000, 7)
    assert all(consistency_check(r.grid, r.caption).consistent for r in records)
    assert {(r.scene.shape, r.scene.color) for r in records} == {(s, c) for s in SHAPES for c in COLORS}


def test_every_placement_classifies_correctly():
    for shape in SHAPES:
        for color in COLORS:
            for r, c, v in placements(shape, W):
                scene = SceneSpec(shape, color, 2, r, c, v)
                cap = caption_scene(scene, W, np.random.default_rng(0))
                res = consistency_check(render_scene(scene, W), cap)
                assert res.consistent, (scene, res.reason)


def test_same_seed_same_file(tmp_path):
    save_dataset(generate_dataset(50, 3), tmp_path / "a.txt")
    save_dataset(generate_dataset(50, 3), tmp_path / "b.txt")
    save_dataset(generate_dataset(50, 4), tmp_path / "c.txt")
    a = (tmp_path / "a.txt").read_bytes()
    assert a == (tmp_path / "b.txt").read_bytes() != (tmp_path / "c.txt").read_bytes()


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        generate_dataset(0, 1)


def test_save_load_round_trip(tmp_path):
    recs = generate_dataset(20, 5)
    save_dataset(recs, tmp_path / "d.txt")
    back, world = load_dataset(tmp_path / "d.txt")
    assert world == W
    for a, b in zip(recs, back):
        assert np.array_equal(a.fused(LAY), b.fused(LAY))


@pytest.mark.parametrize("mutate,match", [
    (lambda lines: lines[:1] + ["1 2 3"], "expected 72 tokens"),
    (lambda lines: [lines[0]] + [" ".join(["40"] + lines[1].split()[1:])], "outside its modality"),
    (lambda lines: ['{"format": "other", "version": 1}'] + lines[1:], "unsupported"),
    (lambda lines: ["not json"] + lines[1:], "bad header"),
    (lambda lines: [], "empty"),
])
def test_load_errors(tmp_path, mutate, match):
    path = tmp_path / "d.txt"
    save_dataset(generate_dataset(2, 5), path)
    path.write_text("\n".join(mutate(path.read_text().splitlines())))
    with pytest.raises(DatasetError, match=match):
        load_dataset(path)


def test_text_rendering_round_trip_and_mask_glyph():
    rec = generate_dataset(1, 9)[0]
    grid = rec.fused(LAY)[:64].copy()
    grid[[0, 9, 63]] = LAY.mask_index
    text = render_text(grid, LAY)
    lines = text.splitlines()
    assert len(lines) == 8 and all(len(ln) == 8 for ln in lines)
    assert lines[0][0] == "#" and lines[1][1] == "#" and lines[7][7] == "#"
    assert np.array_equal(parse_text(text, LAY), grid)
    all_mask = np.full(64, LAY.mask_index)
    assert render_text(all_mask, LAY) == "\n".join(["#" * 8] * 8)
    assert caption_words(np.full(8, LAY.mask_index), LAY) == " ".join(["[MASK]"] * 8)


def test_pixmap_dimensions_and_colors():
    rec = generate_dataset(1, 2)[0]
    text, ppm = render(rec)
    pix = read_ppm(ppm)
    assert pix.shape == (32, 32, 3) and pix.min() >= 0 and pix.max() <= 255
    assert text.splitlines()[-1].startswith("a ")
    grid = np.full(64, LAY.mask_index)
    assert np.all(read_ppm(render_ppm(grid, LAY, scale=1)) == (92, 58, 32))


def test_foreign_token_rejected_by_renderers():
    grid = np.zeros(64, dtype=np.int64)
    grid[5] = LAY.offsets[1] + 1
    with pytest.raises(RenderError):
        render_text(grid, LAY)
    with pytest.raises(RenderError):
        render_ppm(grid, LAY)
    with pytest.raises(RenderError):
        caption_words(np.zeros(8, dtype=np.int64), LAY)


def test_chance_rate_matches_analytic():
    rate, se = chance_rate_mc(W, 20_000, np.random.default_rng(0))
    assert analytic_chance_rate() == pytest.approx(1 / 9)
    assert abs(rate - 1 / 9) < 3 * se


def test_solid_grid_reads_as_stripe():
    solid = np.full(64, 1 + 2 * W.shades + 1)  # blue family
    cap = np.array([W.words.index(w) for w in ["a", "navy", "stripe", "here"] + ["<pad>"] * 4])
    assert consistency_check(solid, cap).consistent
    cap[2] = W.words.index("square")
    assert not consistency_check(solid, cap).consistent


@pytest.mark.parametrize("words,why", [
    (["a", "red", "cross", "there"], "grammar"),
    (["a", "square", "cross", "here"], "color"),
    (["a", "red", "red", "here"], "shape"),
])
def test_bad_captions_are_inconsistent(words, why):
    grid = render_scene(SceneSpec("cross", "red", 0, 2, 2, False), W)
    cap = np.array([W.words.index(w) if w in W.words else 0 for w in words + ["<pad>"] * 4])
    res = consistency_check(grid, cap)
    assert not res.consistent and why in res.reason


@given(st.integers(0, 2**32 - 1))
def test_scene_shapes_fit_the_grid(seed):
    recs = generate_dataset(3, seed)
    for r in recs:
        s = r.scene
        cells = _cells(s.shape, s.row, s.col, s.vertical, W)
        assert np.array_equal(cells.ravel(), r.grid > 0)
        assert consistency_check(r.grid, r.caption).consistent


def test_world_config_round_trip():
    assert WorldConfig.from_dict(json.loads(json.dumps(W.to_dict()))) == W
