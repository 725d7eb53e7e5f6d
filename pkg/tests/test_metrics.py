import itertools
import math

import numpy as np
import pytest

from seldkit import metrics


# ---------------------------------------------------------------------------
# brute-force oracle: an independent scalar implementation of the rules


def angle_deg(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    dot = sum(x * y for x, y in zip(a, b)) / (na * nb)
    return math.degrees(math.acos(max(-1.0, min(1.0, dot))))


def oracle_evaluate(ref_segments, pred_segments, threshold=20.0):
    """Direct transcription of the metric rules, minimal cleverness.

    Per segment and class, pairs are matched by enumerating assignments and
    taking the one with the smallest total angular error. A pair within the
    threshold is a TP; otherwise it adds one FP and one FN. Leftover
    predictions are FP, leftover references FN. S/D/I fold per segment.
    """
    tp = fp = fn = 0
    sdi = 0
    pairs = 0
    err_sum = 0.0
    n_ref = 0
    for ref, pred in zip(ref_segments, pred_segments):
        n_ref += len(ref)
        seg_fp = seg_fn = 0
        for cls in {c for c, _ in ref} | {c for c, _ in pred}:
            rv = [v for c, v in ref if c == cls]
            pv = [v for c, v in pred if c == cls]
            k = min(len(rv), len(pv))
            best = None
            if k:
                for perm in itertools.permutations(range(len(pv)), k):
                    total = sum(angle_deg(rv[i], pv[perm[i]]) for i in range(k))
                    if best is None or total < best[0]:
                        best = (total, perm)
                for i in range(k):
                    e = angle_deg(rv[i], pv[best[1][i]])
                    err_sum += e
                    pairs += 1
                    if e <= threshold:
                        tp += 1
                    else:
                        seg_fp += 1
                        seg_fn += 1
            seg_fp += len(pv) - k
            seg_fn += len(rv) - k
        fp += seg_fp
        fn += seg_fn
        sdi += min(seg_fp, seg_fn) + abs(seg_fn - seg_fp)
    er = sdi / n_ref
    f = 2 * tp / (2 * tp + fp + fn)
    le = err_sum / pairs if pairs else 180.0
    lr = pairs / n_ref
    seld = (er + (1 - f) + le / 180.0 + (1 - lr)) / 4.0
    return {"er": er, "f": f, "le": le, "lr": lr, "seld": seld,
            "tp": tp, "fp": fp, "fn": fn, "pairs": pairs}


def vec(az_deg, el_deg=0.0):
    az, el = math.radians(az_deg), math.radians(el_deg)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


# ---------------------------------------------------------------------------
# angular error


def test_angular_error_basic():
    a = vec(0.0)
    assert metrics.angular_error(a, a) == pytest.approx(0.0)
    assert metrics.angular_error(a, -a) == pytest.approx(180.0)
    assert metrics.angular_error(a, vec(90.0)) == pytest.approx(90.0)


def test_angular_error_normalizes_inputs():
    assert metrics.angular_error([2.0, 0.0, 0.0], [0.0, 0.0, 0.5]) == pytest.approx(90.0)


def test_angular_error_zero_vector_raises():
    with pytest.raises(ValueError, match="zero vector"):
        metrics.angular_error([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# seld_combine


def test_seld_combine_extremes():
    assert metrics.seld_combine(0.0, 1.0, 0.0, 1.0) == 0.0
    assert metrics.seld_combine(1.0, 0.0, 180.0, 0.0) == 1.0


@pytest.mark.parametrize("er,f,le,lr,printed", [
    (0.72, 0.377, 23.5, 0.620, 0.46),
    (0.60, 0.492, 19.0, 0.656, 0.39),
    (0.52, 0.578, 16.8, 0.698, 0.33),
    (0.74, 0.342, 27.0, 0.626, 0.48),
    (0.58, 0.524, 17.7, 0.681, 0.37),
    (0.49, 0.617, 15.2, 0.724, 0.31),
])
def test_seld_combine_published_rows(er, f, le, lr, printed):
    assert abs(metrics.seld_combine(er, f, le, lr) - printed) <= 0.005


def test_seld_combine_rejects_out_of_range():
    with pytest.raises(ValueError):
        metrics.seld_combine(0.5, 1.2, 10.0, 0.5)
    with pytest.raises(ValueError):
        metrics.seld_combine(0.5, 0.5, 200.0, 0.5)
    with pytest.raises(ValueError):
        metrics.seld_combine(-0.1, 0.5, 10.0, 0.5)


def test_seld_combine_monotonicity():
    base = metrics.seld_combine(0.5, 0.5, 20.0, 0.5)
    assert metrics.seld_combine(0.6, 0.5, 20.0, 0.5) > base
    assert metrics.seld_combine(0.5, 0.6, 20.0, 0.5) < base
    assert metrics.seld_combine(0.5, 0.5, 30.0, 0.5) > base
    assert metrics.seld_combine(0.5, 0.5, 20.0, 0.6) < base


# ---------------------------------------------------------------------------
# frames_to_segments


def test_frames_below_threshold_give_empty_segments():
    activity = np.full((20, 3), 0.4)
    doa = np.zeros((20, 3, 3))
    segments = metrics.frames_to_segments(activity, doa)
    assert segments == [[], []] or all(len(s) == 0 for s in segments)
    assert len(segments) == 2


def test_single_active_frame_defines_segment_event():
    activity = np.zeros((10, 2))
    doa = np.zeros((10, 2, 3))
    activity[3, 1] = 0.9
    doa[3, 1] = [1.0, 0.0, 0.0]
    (segment,) = metrics.frames_to_segments(activity, doa)
    assert len(segment) == 1
    cls, v = segment[0]
    assert cls == 1
    np.testing.assert_allclose(v, [1.0, 0.0, 0.0])


def test_two_active_frames_mean_direction():
    activity = np.zeros((10, 1))
    doa = np.zeros((10, 1, 3))
    activity[[2, 7], 0] = 1.0
    doa[2, 0] = [1.0, 0.0, 0.0]
    doa[7, 0] = [0.0, 1.0, 0.0]
    (segment,) = metrics.frames_to_segments(activity, doa)
    _, v = segment[0]
    np.testing.assert_allclose(v, [math.sqrt(0.5), math.sqrt(0.5), 0.0], atol=1e-9)


def test_threshold_boundary_is_active():
    activity = np.full((10, 1), 0.5)
    doa = np.zeros((10, 1, 3))
    doa[:, 0, 0] = 1.0
    (segment,) = metrics.frames_to_segments(activity, doa)
    assert len(segment) == 1


def test_segmenting_respects_frame_hop():
    activity = np.ones((15, 1))
    doa = np.zeros((15, 1, 3))
    doa[:, 0, 2] = 1.0
    segments = metrics.frames_to_segments(activity, doa, frame_hop=0.1)
    assert len(segments) == 2  # 10 frames + a short tail segment


# ---------------------------------------------------------------------------
# evaluate


def test_perfect_prediction_scores_zero():
    segs = [[(0, vec(10.0)), (1, vec(200.0, 30.0))], [(0, vec(-45.0))]]
    report = metrics.evaluate(segs, segs)
    assert report.er20 == 0.0
    assert report.f20 == 1.0
    assert report.le_cd == pytest.approx(0.0, abs=1e-9)
    assert report.lr_cd == 1.0
    assert report.seld == pytest.approx(0.0, abs=1e-12)


def test_class_match_beyond_threshold_counts_fp_and_fn():
    ref = [[(0, vec(0.0))]]
    pred = [[(0, vec(25.0))]]
    report = metrics.evaluate(ref, pred)
    assert report.counts["tp"] == 0
    assert report.counts["fp"] == 1 and report.counts["fn"] == 1
    assert report.counts["s"] == 1
    assert report.er20 == 1.0
    assert report.lr_cd == 1.0
    assert report.le_cd == pytest.approx(25.0, abs=1e-9)


def test_empty_reference_raises():
    with pytest.raises(ValueError, match="empty reference"):
        metrics.evaluate([[], []], [[(0, vec(0.0))], []])


def test_segment_count_mismatch_raises():
    with pytest.raises(ValueError, match="segment count"):
        metrics.evaluate([[]], [[], []])


def test_evaluate_invariant_under_segment_permutation():
    rng = np.random.default_rng(0)
    segs_ref, segs_pred = [], []
    for _ in range(6):
        segs_ref.append([(int(rng.integers(3)), vec(rng.uniform(0, 360)))])
        segs_pred.append([(int(rng.integers(3)), vec(rng.uniform(0, 360)))])
    base = metrics.evaluate(segs_ref, segs_pred)
    order = rng.permutation(6)
    shuffled = metrics.evaluate([segs_ref[i] for i in order], [segs_pred[i] for i in order])
    assert base.er20 == shuffled.er20
    assert base.f20 == shuffled.f20
    assert base.le_cd == pytest.approx(shuffled.le_cd)
    assert base.lr_cd == shuffled.lr_cd


def test_le_ignores_threshold():
    ref = [[(0, vec(0.0))]]
    for offset in (5.0, 25.0, 60.0):
        report = metrics.evaluate(ref, [[(0, vec(offset))]])
        assert report.le_cd == pytest.approx(offset, abs=1e-9)


def test_no_pairs_le_is_worst_case():
    report = metrics.evaluate([[(0, vec(0.0))]], [[(1, vec(0.0))]])
    assert report.le_cd == 180.0
    assert report.lr_cd == 0.0


def test_multi_instance_hungarian_matching():
    # two instances of one class; greedy pairing would cross the assignments
    ref = [[(0, vec(0.0)), (0, vec(40.0))]]
    pred = [[(0, vec(35.0)), (0, vec(10.0))]]
    report = metrics.evaluate(ref, pred)
    oracle = oracle_evaluate(ref, pred)
    assert report.counts["tp"] == oracle["tp"] == 2
    assert report.le_cd == pytest.approx(oracle["le"], abs=1e-9)


def test_exhaustive_grid_matches_oracle():
    # every (ref, pred) combination of 2 classes x {absent, 3 directions}
    # over 2 segments: separations of 15 (inside) and 25/40 (outside threshold)
    dirs = [vec(0.0), vec(15.0), vec(40.0)]
    options = [None] + list(range(3))
    side_configs = []  # all per-segment event sets for one side
    for c0 in options:
        for c1 in options:
            events = []
            if c0 is not None:
                events.append((0, dirs[c0]))
            if c1 is not None:
                events.append((1, dirs[c1]))
            side_configs.append(events)

    rng = np.random.default_rng(42)
    checked = 0
    # all single-segment cases: 16 x 16 = 256
    for ref_seg in side_configs:
        for pred_seg in side_configs:
            if not ref_seg:
                continue
            report = metrics.evaluate([ref_seg], [pred_seg])
            oracle = oracle_evaluate([ref_seg], [pred_seg])
            _assert_matches(report, oracle)
            checked += 1
    # random sample of two-segment cases
    n = len(side_configs)
    for _ in range(400):
        idx = rng.integers(0, n, size=4)
        ref = [side_configs[idx[0]], side_configs[idx[1]]]
        pred = [side_configs[idx[2]], side_configs[idx[3]]]
        if sum(len(s) for s in ref) == 0:
            continue
        report = metrics.evaluate(ref, pred)
        oracle = oracle_evaluate(ref, pred)
        _assert_matches(report, oracle)
        checked += 1
    assert checked >= 500


def _assert_matches(report, oracle):
    assert report.counts["tp"] == oracle["tp"]
    assert report.counts["fp"] == oracle["fp"]
    assert report.counts["fn"] == oracle["fn"]
    assert report.counts["pairs"] == oracle["pairs"]
    assert report.er20 == pytest.approx(oracle["er"], abs=1e-12)
    assert report.f20 == pytest.approx(oracle["f"], abs=1e-12)
    assert report.le_cd == pytest.approx(oracle["le"], abs=1e-9)
    assert report.lr_cd == pytest.approx(oracle["lr"], abs=1e-12)
    assert report.seld == pytest.approx(oracle["seld"], abs=1e-9)


def test_ranges_always_valid():
    rng = np.random.default_rng(7)
    for _ in range(50):
        ref, pred = [], []
        for _ in range(3):
            ref.append([(int(rng.integers(2)), vec(rng.uniform(0, 360), rng.uniform(-80, 80)))
                        for _ in range(rng.integers(0, 3))])
            pred.append([(int(rng.integers(2)), vec(rng.uniform(0, 360), rng.uniform(-80, 80)))
                         for _ in range(rng.integers(0, 3))])
        if sum(len(s) for s in ref) == 0:
            continue
        report = metrics.evaluate(ref, pred)
        assert 0.0 <= report.f20 <= 1.0
        assert 0.0 <= report.lr_cd <= 1.0
        assert 0.0 <= report.le_cd <= 180.0
        assert report.er20 >= 0.0


# ---------------------------------------------------------------------------
# CSV plumbing


def test_event_csv_roundtrip(tmp_path):
    rows = [("clipA", 0, 2, np.array([1.0, 0.0, 0.0])),
            ("clipA", 5, 0, np.array([0.0, 1.0, 0.0])),
            ("clipB", 12, 1, np.array([0.0, 0.0, -1.0]))]
    path = tmp_path / "events.csv"
    metrics.write_event_csv(path, rows)
    back = metrics.read_event_csv(path)
    assert set(back) == {"clipA", "clipB"}
    assert back["clipA"][0][0] == 0 and back["clipA"][0][1] == 2
    np.testing.assert_allclose(back["clipB"][0][2], [0.0, 0.0, -1.0], atol=1e-6)


def test_segments_from_csv_aligns_clips(tmp_path):
    ref_rows = [("c1", 0, 0, np.array([1.0, 0.0, 0.0])),
                ("c1", 14, 1, np.array([0.0, 1.0, 0.0]))]
    pred_rows = [("c1", 3, 0, np.array([1.0, 0.0, 0.0]))]
    ref_path, pred_path = tmp_path / "r.csv", tmp_path / "p.csv"
    metrics.write_event_csv(ref_path, ref_rows)
    metrics.write_event_csv(pred_path, pred_rows)
    ref_segs, pred_segs = metrics.segments_from_csv(
        metrics.read_event_csv(ref_path), metrics.read_event_csv(pred_path), num_classes=2)
    assert len(ref_segs) == len(pred_segs) == 2
    report = metrics.evaluate(ref_segs, pred_segs)
    # segment 0: class 0 matched at 0 deg; segment 1: class 1 missed
    assert report.counts["tp"] == 1
    assert report.counts["fn"] == 1


def test_report_text_and_csv_row():
    report = metrics.evaluate([[(0, vec(0.0))]], [[(0, vec(10.0))]])
    text = report.text()
    assert "SELD" in text and "deg" in text
    row = report.csv_row()
    assert set(row) == {"er20", "f20_pct", "le_cd_deg", "lr_cd_pct", "seld"}
    assert float(row["le_cd_deg"]) == pytest.approx(10.0, abs=1e-3)
