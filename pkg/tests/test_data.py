# tests/test_data.py
from __future__ import annotations

import numpy as np
import pytest

from t3d.common import ConfigError, DimensionError, T3DError
from t3d.data import (
    VideoStore,
    clip_starts,
    crop,
    ensure_store,
    flip,
    frame_indices,
    generate_dataset,
    iter_batches,
    make_pairs,
    render_clip,
    render_video,
    resize_short_side,
    sample_clip,
)
from t3d.schemas import SamplerConfig, SyntheticVideoSpec


class TestGenerate:
    def test_balanced_classes(self, tmp_path):
        spec = SyntheticVideoSpec(count=200, frame_size=8, num_frames=4, object_size=2)
        store = generate_dataset(spec, root=tmp_path / "s")
        assert len(store) == 200
        counts = np.bincount(store.labels(store.ids()), minlength=8)
        assert counts.tolist() == [25] * 8
        val = np.bincount(store.labels(store.ids("val")), minlength=8)
        assert val.tolist() == [5] * 8

    def test_eight_classes(self, store):
        assert store.num_classes == 8
        assert store.class_names[:2] == ["up-slow", "up-fast"]

    def test_fast_frame_matches_slow_frame(self, video_spec):
        origin, color = (3, 5), (0.9, 0.6, 0.7)
        slow = render_video(video_spec, 0, origin, color)
        fast = render_video(video_spec, 1, origin, color)
        for f in range(video_spec.num_frames // 2):
            np.testing.assert_array_equal(fast[:, f], slow[:, 2 * f])
        assert not np.array_equal(fast[:, 1], slow[:, 1])

    def test_object_moves_by_speed(self, store):
        video = store.load(store.ids()[7])  # right-fast
        assert video.step == (0, 2)
        y, x = video.position(3)
        assert (y, x) == (video.origin[0], (video.origin[1] + 6) % 16)

    def test_same_bytes(self, tmp_path, video_spec):
        a = generate_dataset(video_spec, root=tmp_path / "a")
        b = generate_dataset(video_spec, root=tmp_path / "b")
        assert (a.root / "index.jsonl").read_bytes() == (b.root / "index.jsonl").read_bytes()
        for e in a.entries:
            assert (a.root / e["file"]).read_bytes() == (b.root / e["file"]).read_bytes()
        np.testing.assert_array_equal(a.means, b.means)

    def test_seed_changes_jitter(self, tmp_path, video_spec):
        a = generate_dataset(video_spec, root=tmp_path / "a")
        b = generate_dataset(video_spec.model_copy(update={"seed": 9}), root=tmp_path / "b")
        assert [e["origin"] for e in a.entries] != [e["origin"] for e in b.entries]

    def test_reopen(self, store, video_spec):
        again = VideoStore.open(store.root)
        assert again.entries == store.entries
        np.testing.assert_array_equal(again.load(3).frames, store.load(3).frames)
        mtime = (store.root / "manifest.json").stat().st_mtime_ns
        assert ensure_store(video_spec, store.root).entries == store.entries
        assert (store.root / "manifest.json").stat().st_mtime_ns == mtime

    def test_open_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            VideoStore.open(tmp_path / "nothing")


class TestSampling:
    def test_frame_indices(self):
        assert frame_indices(0, 4, 2, 16).tolist() == [0, 2, 4, 6]
        assert frame_indices(6, 4, 2, 8).tolist() == [6, 0, 2, 4]

    def test_test_clip_starts(self):
        cfg = SamplerConfig(clip_len=32)
        assert cfg.stride == 2
        assert clip_starts(64, cfg) == [0, 32]
        assert clip_starts(70, cfg) == [0, 32]
        assert clip_starts(16, cfg) == [0]
        assert clip_starts(64, SamplerConfig(clip_len=16, stride=4)) == [0, 16, 32, 48]

    def test_test_clips_tile_without_gaps(self, store):
        cfg = SamplerConfig(clip_len=2, stride=2, resize_short_side=None, crop_size=16)
        clips = sample_clip(store.load(0), cfg, "test")
        covered = np.concatenate([c.indices for c in clips]).tolist()
        assert covered == list(range(8))
        assert all(c.stride == 1 for c in clips)

    def test_test_mode(self, store, sampler):
        clips = sample_clip(store.load(0), sampler, "test")
        assert [c.start for c in clips] == [0, 4]
        assert all(c.data.shape == (3, 4, 16, 16) for c in clips)
        assert all(c.position == "center" and not c.flipped for c in clips)

    def test_train_mode_in_range(self, store, sampler, rng):
        video = store.load(2)
        for _ in range(20):
            (clip,) = sample_clip(video, sampler, "train", rng)
            assert 0 <= clip.start <= video.num_frames - sampler.clip_len
            assert clip.indices.tolist() == list(range(clip.start, clip.start + 4))

    def test_short_video_loops(self, store, rng):
        cfg = SamplerConfig(clip_len=4, stride=4, resize_short_side=None, crop_size=16)
        (clip,) = sample_clip(store.load(0), cfg, "train", rng)
        assert clip.start == 0
        assert clip.indices.tolist() == [0, 4, 0, 4]

    def test_train_needs_rng(self, store, sampler):
        with pytest.raises(ConfigError):
            sample_clip(store.load(0), sampler, "train")

    def test_flip_involution(self, rng):
        x = rng.standard_normal((3, 4, 5, 6))
        np.testing.assert_array_equal(flip(flip(x)), x)
        np.testing.assert_array_equal(flip(x)[..., 0], x[..., -1])

    def test_corner_crops(self):
        x = np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6)
        assert crop(x, 2, "top_left")[0, 0].tolist() == [[0, 1], [6, 7]]
        assert crop(x, 2, "bottom_right")[0, 0].tolist() == [[28, 29], [34, 35]]
        assert crop(x, 2, "center")[0, 0].tolist() == [[14, 15], [20, 21]]

    def test_crop_too_large(self):
        with pytest.raises(DimensionError) as err:
            crop(np.zeros((3, 2, 8, 16)), 12, "center")
        assert err.value.axis == "height"

    def test_resize_short_side(self, rng):
        x = rng.random((3, 2, 16, 24)).astype(np.float32)
        y = resize_short_side(x, 32)
        assert y.shape == (3, 2, 32, 48)
        assert resize_short_side(x, 8) is x

    def test_mean_subtracted(self, store, sampler):
        frames = np.stack(
            [render_clip(v, np.arange(v.num_frames), sampler) for v in store.videos("train")]
        )
        np.testing.assert_allclose(frames.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-5)

    def test_batches_cover_split_once(self, store, sampler, rng):
        seen = []
        for batch in iter_batches(store, "train", sampler, 3, rng):
            assert batch.clips.shape[1:] == (3, 4, 16, 16)
            seen.extend(v for v, _, _ in batch.provenance)
        assert sorted(seen) == store.ids("train")


class TestPairs:
    def test_invariants(self, store, sampler, rng):
        pairs = make_pairs(store, 2, rng, 32, sampler, split="train")
        assert len(pairs) == 32
        assert int(pairs.labels.sum()) == 16
        train = set(store.ids("train"))
        for i in range(len(pairs)):
            assert {int(pairs.frame_video[i]), int(pairs.clip_video[i])} <= train
            if pairs.labels[i]:
                assert pairs.frame_video[i] == pairs.clip_video[i]
                assert set(pairs.frame_indices[i].tolist()) <= set(pairs.clip_indices[i].tolist())
            else:
                assert pairs.frame_video[i] != pairs.clip_video[i]

    def test_arrays(self, store, sampler, rng):
        pairs = make_pairs(store, 2, rng, 6, sampler)
        frames, clips, labels = pairs.arrays([0, 2])
        assert frames.shape == (2, 3, 2, 16, 16)
        assert clips.shape == (2, 3, 4, 16, 16)
        assert labels.tolist() == pairs.labels[[0, 2]].tolist()

    def test_full_clip_frames(self, store, sampler, rng):
        pairs = make_pairs(store, 4, rng, 8, sampler)
        pos = pairs.labels == 1
        np.testing.assert_array_equal(pairs.frame_indices[pos], pairs.clip_indices[pos])

    def test_deterministic(self, store, sampler):
        a = make_pairs(store, 2, np.random.default_rng(3), 10, sampler)
        b = make_pairs(store, 2, np.random.default_rng(3), 10, sampler)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.clip_indices, b.clip_indices)

    def test_brute_force_full_store(self, tmp_path, sampler):
        spec = SyntheticVideoSpec(count=50, frame_size=16, num_frames=8, object_size=4, val_fraction=0.2)
        store = generate_dataset(spec, root=tmp_path / "fifty")
        pairs = make_pairs(store, 3, np.random.default_rng(11), 200, sampler)
        frames, clips, labels = pairs.arrays()
        assert int(labels.sum()) == 100
        for i in range(len(pairs)):
            fv, cv = int(pairs.frame_video[i]), int(pairs.clip_video[i])
            if not labels[i]:
                assert fv != cv
                continue
            assert fv == cv
            clip_idx = pairs.clip_indices[i].tolist()
            for j, f in enumerate(pairs.frame_indices[i].tolist()):
                assert f in clip_idx
                np.testing.assert_array_equal(frames[i, :, j], clips[i, :, clip_idx.index(f)])

    @pytest.mark.parametrize("X", [0, 5])
    def test_frames_out_of_range(self, store, sampler, rng, X):
        with pytest.raises(ConfigError):
            make_pairs(store, X, rng, 4, sampler)

    def test_needs_two_videos(self, tmp_path, rng, sampler):
        one = generate_dataset(SyntheticVideoSpec(count=1, frame_size=16, num_frames=8, object_size=4), root=tmp_path)
        with pytest.raises(ConfigError):
            make_pairs(one, 1, rng, 4, sampler)


def test_unreadable_video(store):
    (store.root / store.entries[5]["file"]).unlink()
    with pytest.raises(T3DError) as err:
        store.load(5)
    assert "cannot read video 5" in err.value.msg
    assert err.value.exit_code == 1
