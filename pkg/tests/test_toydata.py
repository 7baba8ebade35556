from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualedit.errors import InvalidArgument
from dualedit.imageio import load_image, save_image
from dualedit.toydata import (FIELDS, PALETTE, SIDE, TASK_FIELDS, TASKS, EditTriplet, ToyScene, all_scenes,
                              generate_benchmark, load_benchmark, parse_caption, render, save_benchmark)

scenes = st.sampled_from(all_scenes())


def test_scene_space():
    assert len(all_scenes()) == 3 * 4 * 2 * 3 * 2


@given(scenes, st.integers(0, 10_000))
def test_render_is_deterministic(scene, seed):
    a, b = render(scene, seed), render(scene, seed)
    assert a.shape == (3, 16, 16) and a.dtype == np.float32
    assert np.array_equal(a, b)


def test_distinct_colors_have_distinct_channel_means():
    means = {c: tuple(render(ToyScene(color=c), 0).mean(axis=(1, 2)).round(6)) for c in PALETTE}
    assert len(set(means.values())) == len(PALETTE)


@pytest.mark.parametrize("size", ["small", "large"])
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_red_square_pixel_count_matches_side_squared(size, seed):
    img = render(ToyScene(shape="square", color="red", size=size), seed)
    red = np.array(PALETTE["red"]) / 255.0
    n = np.all(np.abs(img.transpose(1, 2, 0) - red) < 1e-6, axis=-1).sum()
    assert n == SIDE[size] ** 2


@given(scenes)
def test_caption_round_trip(scene):
    assert parse_caption(scene.caption) == scene


def test_parse_caption_errors():
    with pytest.raises(InvalidArgument, match="unknown caption token"):
        parse_caption("a large purple square at left, plain background")
    with pytest.raises(InvalidArgument, match="missing"):
        parse_caption("a red square")
    with pytest.raises(InvalidArgument):
        parse_caption("a large red blue square at left, plain background")


def test_default_benchmark_has_100_triplets_uniform_over_tasks():
    bench = generate_benchmark()
    assert len(bench) == 100
    assert Counter(t.category for t in bench) == {t: 20 for t in TASKS}
    for t in bench:
        t.validate()
        changed = {f for f in FIELDS if getattr(t.source, f) != getattr(t.target, f)}
        assert changed == set(TASK_FIELDS[t.category])


def test_benchmark_deterministic_and_validated():
    assert generate_benchmark(3, seed=5) == generate_benchmark(3, seed=5)
    with pytest.raises(InvalidArgument):
        generate_benchmark(0)
    bad = EditTriplet(0, "attribute", ToyScene(), ToyScene(shape="circle"), 0)
    with pytest.raises(InvalidArgument):
        bad.validate()


def test_benchmark_manifest_round_trip(tmp_path):
    bench = generate_benchmark(2, seed=1)
    manifest = save_benchmark(bench, tmp_path)
    recs = load_benchmark(manifest)
    assert [EditTriplet.from_record(r) for r in recs] == bench
    for r, t in zip(recs, bench):
        assert np.array_equal(load_image(tmp_path / r["image"]), t.image())


def test_image_io_lossless_and_rejects_lossy(tmp_path):
    img = render(ToyScene(background="textured"), 3)
    save_image(tmp_path / "a.ppm", img)
    assert np.array_equal(load_image(tmp_path / "a.ppm"), img)
    with pytest.raises(InvalidArgument):
        save_image(tmp_path / "a.jpg", img)
    (tmp_path / "junk.ppm").write_bytes(b"not an image")
    with pytest.raises(InvalidArgument):
        load_image(tmp_path / "junk.ppm")
