import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazebench.annotation import (
    AnnotationConfig,
    GazeSample,
    RawSample,
    annotate_session,
    classify_gaze_event,
    crop_augment,
    crop_origin,
    in_view_label,
    label_session,
    make_heatmap_target,
    pair_clips,
    rasterize,
    round_half_away,
    sample_frames,
    segment_clips,
    synchronize,
    uncrop_x,
)
from gazebench.errors import AmbiguousSync, ClipTooShort, ConfigInvalid, NoOverlap
from gazebench.synthworld import SceneConfig, generate_session
from oracles import brute_force_labels


def gs(x, y, label="fixation", conf=1.0, frame=0):
    return GazeSample(frame, "neck", x, y, conf, label)


# ------------------------------------------------------------ synchronize

def test_synchronize_examples():
    assert synchronize([5, 6, 7, 8], [3, 4, 5, 6, 7, 8, 9]) == 2
    assert synchronize([1, 2, 3, 4], [1, 2, 3, 4]) == 0
    assert synchronize([-1, -1, 0, 1, 2, 3], [0, 1, 2, 3]) == -2


def test_synchronize_errors():
    with pytest.raises(NoOverlap):
        synchronize([1, 2], [1, 2, 3])
    with pytest.raises(NoOverlap):
        synchronize([1, 2, 3], [4, 5, 6])
    with pytest.raises(AmbiguousSync):
        # repeated markers make two offsets equally plausible
        synchronize([1, 2, 3, 1, 2, 3], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(k=st.integers(-100, 100), n=st.integers(3, 60))
def test_synchronize_recovers_shift(k, n):
    ids = list(range(n))
    a = [-1] * max(0, -k) + ids
    b = [-1] * max(0, k) + ids
    assert synchronize(a, b) == k


# ------------------------------------------------------------ event labels

def test_classify_examples():
    prev = gs(0.5, 0.5)
    assert classify_gaze_event(prev, RawSample(0.505, 0.5, 1.0, True), disp_threshold=0.02) == "fixation"
    assert classify_gaze_event(prev, RawSample(0.6, 0.5, 1.0, True)) == "saccade"
    assert classify_gaze_event(prev, RawSample(1.2, 0.5, 1.0, False)) == "truncated"
    assert classify_gaze_event(prev, RawSample(0.5, 0.5, 0.1, True), conf_threshold=0.5) == "untracked"
    assert classify_gaze_event(None, RawSample(0.9, 0.1, 1.0, True)) == "fixation"
    # displacement is not measured from an out-of-view previous sample
    assert classify_gaze_event(gs(1.2, 0.5, "truncated"), RawSample(0.5, 0.5, 1.0, True)) == "fixation"


def test_labels_match_brute_force(short_session):
    labels = label_session(short_session)
    cfg = short_session.config
    for v in ("head", "neck"):
        g = short_session.gaze[v]
        ref = brute_force_labels(g.x / cfg.width, g.y / cfg.height, g.confidence, g.in_bounds)
        assert [s.label for s in labels[v]] == ref


def test_label_invariants(short_session):
    for v, samples in label_session(short_session).items():
        for s in samples:
            if s.label == "truncated":
                assert not (0 <= s.x < 1 and 0 <= s.y < 1)
            elif s.label == "untracked":
                assert s.confidence < 0.5
            else:
                assert 0 <= s.x < 1 and 0 <= s.y < 1 and s.confidence >= 0.5


def test_in_view_label():
    assert in_view_label(gs(0.5, 0.5, "fixation")) == 1
    assert in_view_label(gs(0.5, 0.5, "saccade")) == 1
    assert in_view_label(gs(1.5, 0.5, "truncated")) == 0
    assert in_view_label(gs(0.5, 0.5, "untracked", conf=0.1)) == 0


# ------------------------------------------------------------ heatmaps

def test_round_half_away():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]).tolist() == [1, 2, 3, -1, -2, 0]


def test_rasterize_clamps():
    assert rasterize(0.0, 0.0, 64, 64) == (0, 0)
    assert rasterize(0.999, 0.999, 64, 64) == (63, 63)
    assert rasterize(0.5, 0.5, 64, 64) == (32, 32)


def test_uniform_target_for_out_of_view():
    for label in ("truncated", "untracked"):
        t = make_heatmap_target(gs(1.3, 0.2, label), 64, 64)
        assert np.all(t == 1.0 / 4096)


def test_gaussian_target_center():
    t = make_heatmap_target(gs(0.5, 0.5), 64, 64, 3.0)
    assert abs(t.sum() - 1) < 1e-6
    assert np.unravel_index(np.argmax(t), t.shape) == (32, 32)


def test_gaussian_target_quarter_point():
    t = make_heatmap_target(gs(0.25, 0.75), 64, 64, 3.0)
    row, col = np.unravel_index(np.argmax(t), t.shape)
    assert (col, row) == (16, 48)
    # independent summation of the discretized Gaussian within 3 sigma
    rr, cc = np.mgrid[0:64, 0:64]
    g = np.exp(-((rr - 48) ** 2 + (cc - 16) ** 2) / 18.0)
    g /= g.sum()
    assert np.allclose(t, g, atol=1e-15)
    assert g[(rr - 48) ** 2 + (cc - 16) ** 2 <= 81].sum() >= 0.98


def test_heatmap_preconditions():
    with pytest.raises(ValueError):
        make_heatmap_target(gs(0.5, 0.5), 3, 64)
    with pytest.raises(ValueError):
        make_heatmap_target(gs(0.5, 0.5), 64, 64, sigma=0)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(0, 0.9999), y=st.floats(0, 0.9999), sigma=st.floats(0.5, 8),
       h=st.sampled_from([4, 16, 64]), w=st.sampled_from([4, 32, 64]))
def test_heatmap_sums_to_one(x, y, sigma, h, w):
    t = make_heatmap_target(gs(x, y), h, w, sigma)
    assert abs(t.sum() - 1) < 1e-6 and t.min() >= 0
    assert np.unravel_index(np.argmax(t), t.shape) == rasterize(x, y, h, w)


# ------------------------------------------------------------ clips

def _session(n_frames):
    return generate_session(SceneConfig(duration=n_frames / 20.0, seed=1), render=False)


def test_segment_clip_counts():
    clips = segment_clips(_session(240), 5.0)
    neck = [c for c in clips if c.view == "neck"]
    assert [c.start for c in neck] == [0, 100] and all(c.length == 100 for c in neck)
    assert segment_clips(_session(99), 5.0) == []


def test_segment_default_session_36_clips():
    s = generate_session(SceneConfig(seed=3), render=False)
    clips = segment_clips(s, 5.0)
    for v in ("head", "neck"):
        vc = [c for c in clips if c.view == v]
        assert len(vc) == 36
        for c in vc:
            assert len(c.samples) == c.length == 100
            assert [x.frame for x in c.samples] == list(range(c.start, c.start + 100))
            assert c.in_view.shape == (100,) and c.rel_rotations.shape == (100, 3, 3)


def test_segment_requires_integral_length():
    with pytest.raises(ValueError):
        segment_clips(_session(240), 5.02)


def test_pair_clips_align(short_session):
    pairs = pair_clips(segment_clips(short_session, 5.0, with_frames=False))
    assert len(pairs) == 2
    for p in pairs:
        assert p.head.start == p.neck.start and p.head.view == "head" and p.neck.view == "neck"


def test_sample_frames():
    assert sample_frames(100, 8, 8, "eval") == [0, 8, 16, 24, 32, 40, 48, 56]
    rng = np.random.default_rng(0)
    assert sample_frames(57, 8, 8, "train", rng) == [0, 8, 16, 24, 32, 40, 48, 56]
    with pytest.raises(ClipTooShort):
        sample_frames(56, 8, 8, "eval")
    starts = {sample_frames(100, 8, 8, "train", rng)[0] for _ in range(500)}
    assert starts == set(range(44))


def test_crop_origins():
    assert [crop_origin(96, 64, m) for m in ("left", "center", "right")] == [0, 16, 32]


def test_crop_relabels_and_renormalizes():
    frames = np.arange(2 * 4 * 96).reshape(2, 4, 96, 1)
    samples = [gs(10 / 96, 0.5), gs(48 / 96, 0.5), gs(48 / 96, 0.5, "untracked", 0.1)]
    out_f, right = crop_augment(frames, samples, "right", 64)
    assert out_f.shape == (2, 4, 64, 1) and np.array_equal(out_f, frames[:, :, 32:])
    assert right[0].label == "truncated"
    _, centre = crop_augment(frames, samples, "center", 64)
    assert centre[1].x == pytest.approx(0.5) and centre[1].label == "fixation"
    assert centre[2].label == "untracked"


@settings(max_examples=100, deadline=None)
@given(x=st.floats(0, 0.999), mode=st.sampled_from(["left", "center", "right"]),
       w=st.integers(8, 128), frac=st.floats(0.3, 1.0))
def test_uncrop_round_trip(x, mode, w, frac):
    cw = max(1, int(w * frac))
    _, (s,) = crop_augment(np.zeros((1, 2, w, 1)), [gs(x, 0.5)], mode, cw)
    if s.label == "fixation":
        assert abs(uncrop_x(s.x, w, cw, mode) - x) < 1e-9


def test_annotation_config_validation():
    with pytest.raises(ConfigInvalid):
        AnnotationConfig(sigma=0)
    with pytest.raises(ConfigInvalid):
        AnnotationConfig.from_dict({"nope": 1})


def test_annotate_session_pipeline(short_session):
    s = dataclasses.replace(short_session, lead={"head": 0, "neck": 0})  # forget the truth
    ann = annotate_session(s)
    assert ann.offset == 7 and s.lead == short_session.lead
    assert ann.mapping_error < 1e-6
    assert len(ann.clips) == 4
    for c in ann.clips:
        assert c.frames.shape == (100, 64, 64, 1)
        assert np.array_equal(c.frames, short_session.synced_frames(c.view)[c.start:c.start + 100])
