import filecmp
import json

import numpy as np
import pytest

from compvid.conditions import estimate_motion
from compvid.corpus import (PALETTE, VOCABULARY, SceneSpec, Sprite, direction_word, generate_dataset,
                            load_sample, make_corpus, parse_caption, random_spec, read_field, read_manifest,
                            render, write_field)


def one_sprite(velocity, start=(24, 24), shape="circle", size=3, frames=4, **kw):
    return SceneSpec([Sprite(shape, "red", size, "near", velocity, start)], frames=frames, height=48, width=48,
                     **kw)


def test_static_sprite():
    s = render(one_sprite((0, 0)))
    assert all(np.array_equal(s.frames[0], f) for f in s.frames)
    assert not s.flow.any()


def test_circle_flow_matches_velocity():
    s = render(one_sprite((2, 0), start=(20, 20), size=6))
    for t in range(len(s.flow)):
        inside = s.masks[t][0]
        assert np.all(s.flow[t][inside] == [2, 0])
        assert not s.flow[t][~inside].any()


@pytest.mark.parametrize("size", [2, 3, 4])
def test_block_matching_recovers_circle_velocity(size):
    # blocks that hold at least half of a small circle are matched without ambiguity
    checked = 0
    for cx in range(10, 36, 3):
        for cy in range(10, 36, 3):
            s = render(one_sprite((2, 0), start=(cx, cy), size=size, frames=2))
            v = estimate_motion(s.frames[0], s.frames[1], 8, 4)
            m = s.masks[1][0]
            share = m.reshape(6, 8, 6, 8).sum(axis=(1, 3)) / m.sum()
            sel = share >= 0.5
            assert np.all(v[sel] == [2, 0]), (cx, cy)
            checked += sel.sum()
    assert checked > 50


def test_same_seed_same_sample():
    a, b = render(random_spec(7)), render(random_spec(7))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.flow.tobytes() == b.flow.tobytes() and a.depth.tobytes() == b.depth.tobytes()
    assert a.caption == b.caption
    assert render(random_spec(8)).frames.tobytes() != a.frames.tobytes()


def test_sprites_stay_inside_frame():
    for seed in range(200):
        spec = random_spec(seed, frames=8, height=32, width=32)
        for s in spec.sprites:
            for t in (0, spec.frames - 1):
                cx, cy = s.start[0] + s.velocity[0] * t, s.start[1] + s.velocity[1] * t
                assert s.size <= cx <= spec.width - 1 - s.size
                assert s.size <= cy <= spec.height - 1 - s.size


def test_out_of_palette_color():
    with pytest.raises(ValueError, match="palette"):
        Sprite("circle", "mauve", 3, "near", (0, 0), (10, 10))


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec([])
    with pytest.raises(ValueError):
        one_sprite((0, 0), background="stripes")


def test_generate_one(tmp_path):
    recs = generate_dataset(1, 5, tmp_path / "d", frames=3, height=16, width=16)
    assert len(recs) == 1
    assert read_manifest(tmp_path / "d") == json.loads(json.dumps(recs))
    s = load_sample(tmp_path / "d" / recs[0]["path"])
    ref = render(random_spec(recs[0]["seed"], frames=3, height=16, width=16))
    np.testing.assert_array_equal(s.frames, ref.frames)
    np.testing.assert_array_equal(s.flow, ref.flow)
    np.testing.assert_allclose(s.depth, ref.depth, atol=1e-7)
    assert s.caption == ref.caption


def test_two_runs_byte_identical(tmp_path):
    generate_dataset(3, 11, tmp_path / "a", frames=3, height=16, width=16)
    generate_dataset(3, 11, tmp_path / "b", frames=3, height=16, width=16)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files_a], shallow=False)
    assert mismatch == [] and errors == []


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        generate_dataset(1, 0, blocker / "sub", frames=2, height=16, width=16)


def test_vocabulary_scan():
    for s in make_corpus(512, 3, frames=2, height=16, width=16):
        assert set(s.caption.split()) <= set(VOCABULARY)
        assert s.caption.split() and all(w in VOCABULARY for w in s.caption.split())


def test_caption_round_trip():
    for seed in range(100):
        spec = random_spec(seed)
        parsed = parse_caption(render(spec).caption)
        assert parsed["background"] == spec.background
        assert [(p["color"], p["shape"], p["direction"]) for p in parsed["sprites"]] == \
               [(s.color, s.shape, direction_word(s.velocity)) for s in spec.sprites]


def test_direction_words():
    assert direction_word((1, 0)) == "right"
    assert direction_word((0, -2)) == "up"
    assert direction_word((-1, 1)) == "down-left"
    assert direction_word((0, 0)) == "nowhere"


def test_warp_by_flow_reproduces_sprite_interiors():
    for s in make_corpus(30, 9, frames=5, height=32, width=32):
        for t in range(len(s.flow)):
            nxt = s.frames[t + 1]
            for i, sp in enumerate(s.spec.sprites):
                # pixels of sprite i visible in both frames
                ys, xs = np.nonzero(s.masks[t][i])
                dx, dy = sp.velocity
                keep = s.masks[t + 1][i][ys + dy, xs + dx]
                ys, xs = ys[keep], xs[keep]
                fl = s.flow[t][ys, xs].astype(int)
                np.testing.assert_array_equal(nxt[ys + fl[:, 1], xs + fl[:, 0]], s.frames[t][ys, xs])


def test_palette_colors_render_exactly():
    s = render(one_sprite((1, 0)))
    assert np.allclose(s.frames[0][s.masks[0][0]], np.array(PALETTE["red"]) / 255)


def test_field_file_round_trip(tmp_path):
    f = np.random.default_rng(0).standard_normal((2, 4, 6, 2)).astype(np.float32)
    write_field(tmp_path / "f.bin", f)
    np.testing.assert_array_equal(read_field(tmp_path / "f.bin"), f)
    (tmp_path / "g.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_field(tmp_path / "g.bin")
