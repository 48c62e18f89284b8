import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csta import data as D
from csta.data import (
    AugmentConfig,
    Dataset,
    EmptySampleError,
    ParseError,
    SkeletonSequence,
    ValidationError,
)

from ntu_fixtures import ntu_text


def seq(n_frames, rng=None, label=0):
    rng = rng or np.random.default_rng(n_frames)
    return SkeletonSequence(rng.normal(size=(n_frames, 25, 3)), label=label)


def ramp_seq(n_frames, label=0):
    """Frame ``t`` has every coordinate equal to ``t``: frame ids are readable."""
    coords = np.broadcast_to(np.arange(n_frames, dtype=float)[:, None, None], (n_frames, 25, 3)).copy()
    return SkeletonSequence(coords, label=label)


def frame_ids(fixed):
    return fixed.position[:, 0, 0].astype(int)


# -- NTU parsing ------------------------------------------------------------


def test_ntu_zero_fixture():
    s = D.parse_ntu_skeleton(ntu_text([[("1", np.zeros((25, 3)))], [("1", np.zeros((25, 3)))]]))
    assert s.num_frames == 2
    assert np.all(s.coords == 0)


def test_ntu_hand_decoded_values():
    text = ntu_text([[("7", np.zeros((25, 3)))]])
    # overwrite joint 3 (0-based) with literal values
    lines = text.splitlines()
    lines[4 + 3] = "0.218 -0.1734 3.786 1 2 3 4 0 0 0 0 2"
    s = D.parse_ntu_skeleton("\n".join(lines))
    assert s.coords[0, 3].tolist() == [0.218, -0.1734, 3.786]
    assert np.count_nonzero(s.coords) == 3


def test_ntu_selects_highest_motion_body(rng):
    static = rng.normal(size=(25, 3))
    frames = []
    for t in range(4):
        moving = static + 0.1 * t
        frames.append([("A", static), ("B", moving)])
    s = D.parse_ntu_skeleton(ntu_text(frames))

    def energy(track):
        return sum(np.sum((b - a) ** 2) for a, b in zip(track, track[1:]))

    tracks = {"A": [static] * 4, "B": [static + 0.1 * t for t in range(4)]}
    best = max(tracks, key=lambda k: energy(tracks[k]))
    assert best == "B"
    np.testing.assert_array_equal(s.coords, np.stack(tracks["B"]))


def test_ntu_truncated_joint_block():
    text = ntu_text([[("1", np.zeros((25, 3)))], [("1", np.zeros((25, 3)))]])
    lines = text.splitlines()
    # drop the last joint of the first body: line 29 (1-based) is now the
    # next frame's body count, which is not a joint line
    del lines[28]
    with pytest.raises(ParseError) as exc:
        D.parse_ntu_skeleton("\n".join(lines))
    assert exc.value.line == 29


def test_ntu_truncated_at_eof():
    lines = ntu_text([[("1", np.zeros((25, 3)))]]).splitlines()[:-1]
    with pytest.raises(ParseError, match="end of input"):
        D.parse_ntu_skeleton("\n".join(lines))


def test_ntu_non_numeric_coordinate():
    lines = ntu_text([[("1", np.zeros((25, 3)))]]).splitlines()
    lines[6] = "0.1 abc 0.3 1 2 3 4 0 0 0 0 2"
    with pytest.raises(ParseError) as exc:
        D.parse_ntu_skeleton("\n".join(lines))
    assert exc.value.line == 7


def test_ntu_bad_counts():
    with pytest.raises(ParseError):
        D.parse_ntu_skeleton("two\n")
    bad = ntu_text([[("1", np.zeros((25, 3)))]]).replace("\n25\n", "\n24\n", 1)
    with pytest.raises(ParseError, match="expected 25 joints"):
        D.parse_ntu_skeleton(bad)


def test_ntu_no_bodies():
    with pytest.raises(EmptySampleError):
        D.parse_ntu_skeleton("3\n0\n0\n0\n")


def test_ntu_file_metadata(tmp_path):
    p = tmp_path / "S001C002P003R002A013.skeleton"
    p.write_text(ntu_text([[("1", np.zeros((25, 3)))]] * 3))
    s = D.parse_ntu_file(p)
    assert (s.view, s.subject, s.label) == (2, 3, 12)
    ds = D.ntu_dataset([p])
    assert ds.splits == {"cross_subject": ["test"], "cross_view": ["train"]}


# -- canonical JSON ---------------------------------------------------------


def test_canonical_empty():
    ds = D.parse_canonical_json('{"classes": [], "samples": []}')
    assert len(ds) == 0 and ds.class_names == []


def test_canonical_round_trip_bit_identical(rng):
    coords = rng.normal(size=(3, 25, 3)) * np.array([1e-7, 1.0, 1e5])
    ds = Dataset([SkeletonSequence(coords, 1, 4, 2, "x.skeleton")], ["a", "b"], {"p": ["test"]})
    back = D.parse_canonical_json(D.write_canonical_json(ds))
    assert back.samples[0].coords.tobytes() == coords.tobytes()
    s = back.samples[0]
    assert (s.label, s.subject, s.view, s.source) == (1, 4, 2, "x.skeleton")
    assert back.class_names == ["a", "b"] and back.splits == {"p": ["test"]}
    assert D.write_canonical_json(back) == D.write_canonical_json(ds)


def test_canonical_label_out_of_range():
    doc = {"classes": ["a"], "samples": [{"label": 1, "subject": 0, "view": 0, "frames": [[[0, 0, 0]] * 25]}]}
    with pytest.raises(ValidationError) as exc:
        D.parse_canonical_json(json.dumps(doc))
    assert exc.value.path == "$.samples[0].label"


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda d: d.pop("classes"), "$"),
        (lambda d: d["samples"][0].update(subject="x"), "$.samples[0].subject"),
        (lambda d: d["samples"][0]["frames"][0].pop(), "$.samples[0].frames[0]"),
        (lambda d: d["samples"][0]["frames"][0][4].append(1.0), "$.samples[0].frames[0][4]"),
        (lambda d: d.update(splits={"cv": []}), "$.splits.cv"),
    ],
)
def test_canonical_schema_violations_name_path(mutate, path):
    frames = [[[0, 0, 0] for _ in range(25)]]
    doc = {"classes": ["a"], "samples": [{"label": 0, "subject": 0, "view": 0, "frames": frames}]}
    mutate(doc)
    with pytest.raises(ValidationError) as exc:
        D.parse_canonical_json(json.dumps(doc))
    assert exc.value.path == path


# -- motion stream ----------------------------------------------------------


def test_motion_static_is_zero(rng):
    pos = np.repeat(rng.normal(size=(1, 25, 3)), 30, axis=0)
    assert not np.any(D.motion_stream(pos))


def test_motion_ramp():
    pos = np.broadcast_to(np.arange(30.0)[:, None, None], (30, 25, 3))
    m = D.motion_stream(pos)
    assert np.all(m[:-1] == 1.0) and np.all(m[-1] == 0.0)
    assert m.shape == pos.shape


def test_motion_too_short():
    with pytest.raises(ValueError):
        D.motion_stream(np.zeros((1, 25, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_motion_translation_invariant(T, dx, dy, dz, seed):
    pos = np.random.default_rng(seed).normal(size=(T, 25, 3))
    shifted = pos + np.array([dx, dy, dz])
    np.testing.assert_allclose(D.motion_stream(shifted), D.motion_stream(pos), atol=1e-12)


# -- sampling and cropping --------------------------------------------------


def test_sample_exact_length_is_identity():
    s = ramp_seq(30)
    out = D.temporal_random_sample(s, 30, D.make_rng(5))
    np.testing.assert_array_equal(out.position, s.coords)


def test_sample_deterministic_and_increasing():
    s = ramp_seq(100)
    a = frame_ids(D.temporal_random_sample(s, 30, D.make_rng(11)))
    b = frame_ids(D.temporal_random_sample(s, 30, D.make_rng(11)))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a) > 0)


def test_sample_short_sequence():
    ids = frame_ids(D.temporal_random_sample(ramp_seq(10), 30, D.make_rng(3)))
    assert len(ids) == 30 and ids.min() >= 0 and ids.max() < 10
    assert np.all(np.diff(ids) >= 0)


def test_crop_degenerate_range():
    s = ramp_seq(30)
    out = D.temporal_random_crop(s, (1.0, 1.0), 30, D.make_rng(0))
    np.testing.assert_array_equal(out.position, s.coords)


def test_crop_bounds():
    s = ramp_seq(100)
    for seed in range(200):
        start, length = D.crop_window(100, (0.5, 1.0), D.make_rng(seed))
        assert 50 <= length <= 100 and 0 <= start <= 100 - length
        ids = frame_ids(D.temporal_random_crop(s, (0.5, 1.0), 30, D.make_rng(seed)))
        assert ids.min() == start and ids.max() == start + length - 1


def test_even_spacing_formula():
    expected = [int(np.floor(k * 59 / 29 + 0.5)) for k in range(30)]
    assert D.even_indices(60, 30).tolist() == expected
    assert expected[0] == 0 and expected[-1] == 59


def test_crop_rejects_bad_ratio():
    for bad in [(0.0, 1.0), (0.8, 0.5), (0.5, 1.2)]:
        with pytest.raises(ValueError):
            D.temporal_random_crop(ramp_seq(40), bad, 30, D.make_rng(0))


# -- augmentation -----------------------------------------------------------


def test_augment_defaults_eight_per_sample():
    ds = Dataset([seq(40 + i, label=i % 2) for i in range(10)], ["a", "b"])
    out = D.augment(ds, AugmentConfig(), seed=1)
    assert len(out) == 80
    assert [o.label for o in out] == [s.label for s in ds.samples for _ in range(8)]
    for o in out:
        assert o.position.shape == (30, 25, 3) and o.motion.shape == (30, 25, 3)


def test_augment_disabled():
    assert D.augment([seq(40)], AugmentConfig(0, 0), seed=1) == []


def test_augment_deterministic():
    ds = [seq(50), seq(70)]
    a = D.augment(ds, AugmentConfig(), seed=9)
    b = D.augment(ds, AugmentConfig(), seed=9)
    assert all(x.position.tobytes() == y.position.tobytes() for x, y in zip(a, b))
    c = D.augment(ds, AugmentConfig(), seed=10)
    assert any(x.position.tobytes() != y.position.tobytes() for x, y in zip(a, c))


def test_augment_frames_monotone():
    out = D.augment([ramp_seq(73)], AugmentConfig(crop_ratio=(0.5, 1.0)), seed=4)
    for o in out:
        assert np.all(np.diff(frame_ids(o)) >= 0)
        np.testing.assert_array_equal(o.motion, D.motion_stream(o.position))


def test_center_on_spine_flag():
    s = seq(40)
    out = D.uniform_select(s, 30, center=True)
    idx = D.even_indices(40, 30)
    np.testing.assert_allclose(out.position, s.coords[idx] - s.coords[0, D.SPINE_BASE])


# -- synthetic data ---------------------------------------------------------


def test_synthetic_dataset_layout():
    ds = D.make_synthetic_dataset(seed=7)
    assert len(ds) == 120 and ds.num_classes == 3
    tags = ds.splits["default"]
    for c in range(3):
        mine = [t for s, t in zip(ds.samples, tags) if s.label == c]
        assert mine.count("train") == 30 and mine.count("test") == 10
    assert len(ds.subset("train")) == 90 and len(ds.subset("test")) == 30


def test_synthetic_classes_move_where_designed():
    ds = D.make_synthetic_dataset(n_per_class=4, n_test_per_class=1, noise=0.0, seed=1)
    arm = list(D.LEFT_ARM_JOINTS)
    leg = list(D.RIGHT_LEG_JOINTS)
    for s in ds.samples:
        travel = np.abs(np.diff(s.coords, axis=0)).sum(axis=(0, 2))
        if s.label == 0:
            assert travel[arm].min() > 10 * np.delete(travel, arm).max()
        elif s.label == 1:
            assert travel[leg].min() > 10 * np.delete(travel, leg).max()
        else:
            assert travel.min() > 0.1
