"""Synthetic scenario generator: determinism, controlled multimodality,
occlusion geometry, and on-disk round trips."""

import json
import os

import numpy as np
import pytest

from mmforecast import data as D


@pytest.fixture
def params():
    return D.ScenarioParams(rng_seed=7)


def test_params_validation():
    with pytest.raises(ValueError):
        D.ScenarioParams(p_mode=1.5)
    with pytest.raises(ValueError):
        D.ScenarioParams(horizon=5)
    with pytest.raises(ValueError):
        D.ScenarioParams(occluder_speed=0)


def test_input_times(params):
    assert params.input_times == [-9, -6, -3]


def test_clip_deterministic(params, table):
    a = D.generate_clip(params, 42, table=table)
    b = D.generate_clip(params, 42, table=table)
    assert a.mode == b.mode
    assert np.array_equal(a.target_frame.data, b.target_frame.data)
    for fa, fb in zip(a.input_frames, b.input_frames):
        assert np.array_equal(fa.data, fb.data)
    c = D.generate_clip(params, 43, table=table)
    assert not all(np.array_equal(x.data, y.data)
                   for x, y in zip(a.input_frames, c.input_frames))


def test_counterfactual_pair_shares_past(params, table):
    clear, ped = D.generate_counterfactual_pair(params, 5, table=table)
    assert clear.mode == D.MODE_CLEAR and ped.mode == D.MODE_PEDESTRIAN
    for fa, fb in zip(clear.input_frames, ped.input_frames):
        assert np.array_equal(fa.data, fb.data)
    assert not np.array_equal(clear.target_frame.data, ped.target_frame.data)
    # futures differ only inside the revealed region
    y0, y1, x0, x1 = ped.descriptor.revealed_region
    diff = clear.target_frame.data != ped.target_frame.data
    ys, xs = np.nonzero(diff)
    assert np.all((ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1))


def test_region_occluded_in_inputs_clear_at_target(params, table):
    for seed in range(10):
        clip = D.generate_clip(params, seed, table=table)
        y0, y1, x0, x1 = clip.descriptor.revealed_region
        for f in clip.input_frames:
            assert np.all(f.data[y0:y1, x0:x1] == D.CAR)
        assert not np.any(clip.target_frame.data[y0:y1, x0:x1] == D.CAR)


def test_pedestrians_only_in_region_and_mode(params, table):
    n_ped = 0
    for seed in range(40):
        clip = D.generate_clip(params, seed, table=table)
        has_ped = np.any(clip.target_frame.data == D.PEDESTRIAN)
        assert has_ped == (clip.mode == D.MODE_PEDESTRIAN)
        n_ped += has_ped
        for f in clip.input_frames:
            assert not np.any(f.data == D.PEDESTRIAN)
        if has_ped:
            y0, y1, x0, x1 = clip.descriptor.revealed_region
            ys, xs = np.nonzero(clip.target_frame.data == D.PEDESTRIAN)
            assert np.all((ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1))
    # mode frequency is near p_mode = 0.5
    assert 10 <= n_ped <= 30


def test_p_mode_extremes(table):
    p0 = D.ScenarioParams(p_mode=0.0)
    p1 = D.ScenarioParams(p_mode=1.0)
    for seed in range(5):
        assert D.generate_clip(p0, seed, table=table).mode == D.MODE_CLEAR
        assert D.generate_clip(p1, seed, table=table).mode == D.MODE_PEDESTRIAN


def test_mode_override_keeps_past(params, table):
    nat = D.generate_clip(params, 9, table=table)
    forced = D.generate_clip(params, 9, mode=D.MODE_PEDESTRIAN, table=table)
    for fa, fb in zip(nat.input_frames, forced.input_frames):
        assert np.array_equal(fa.data, fb.data)


def test_image_too_small_raises(table):
    with pytest.raises(D.DatasetError):
        D.generate_clip(D.ScenarioParams(image_size=(64, 40)), 0, table=table)


def test_write_and_load_roundtrip(params, table, tmp_path):
    root = str(tmp_path / "ds")
    manifest = D.write_dataset(params, 3, 2, 1, root)
    assert manifest["counts"] == {"train": 3, "val": 2, "test": 1}
    clips = list(D.iterate_split(root, "train", table))
    assert len(clips) == 3
    regen = D.generate_clip(params, 0, table=table)
    assert clips[0].clip_id == regen.clip_id
    assert np.array_equal(clips[0].target_frame.data, regen.target_frame.data)
    assert clips[0].mode == regen.mode
    assert clips[0].times == regen.times
    # split seeds are disjoint: val clip 0 differs from train clip 0
    val0 = next(D.iterate_split(root, "val", table))
    assert val0.clip_id != clips[0].clip_id


def test_write_refuses_nonempty(params, tmp_path):
    root = str(tmp_path / "ds")
    D.write_dataset(params, 1, 0, 0, root)
    with pytest.raises(D.DatasetError):
        D.write_dataset(params, 1, 0, 0, root)
    D.write_dataset(params, 1, 0, 0, root, overwrite=True)


def test_load_clip_errors(params, table, tmp_path):
    root = str(tmp_path / "ds")
    D.write_dataset(params, 1, 0, 0, root)
    clip_dir = os.path.join(root, "train", "clip_00000000")

    meta_path = os.path.join(clip_dir, "clip.json")
    meta = json.load(open(meta_path))
    del meta["mode"]
    json.dump(meta, open(meta_path, "w"))
    with pytest.raises(D.ParseError, match="mode"):
        D.load_clip(clip_dir, table)

    meta["mode"] = "upside_down"
    json.dump(meta, open(meta_path, "w"))
    with pytest.raises(D.ParseError, match="mode"):
        D.load_clip(clip_dir, table)

    meta["mode"] = D.MODE_CLEAR
    json.dump(meta, open(meta_path, "w"))
    os.remove(os.path.join(clip_dir, "frame_-9.png"))
    with pytest.raises(D.ParseError, match="frame_-9"):
        D.load_clip(clip_dir, table)

    os.remove(meta_path)
    with pytest.raises(D.ParseError, match="clip.json"):
        D.load_clip(clip_dir, table)


def test_iterate_missing_split_yields_nothing(tmp_path, table):
    assert list(D.iterate_split(str(tmp_path), "train", table)) == []


def test_params_hash_sensitivity(params):
    other = D.ScenarioParams(rng_seed=8)
    assert params.params_hash() != other.params_hash()
    assert params.params_hash() == D.ScenarioParams(rng_seed=7).params_hash()
