"""Joint localization/detection metrics over one-second segments.

Detection is localization-aware: a prediction counts as a true positive only
if its class matches a reference in the same segment and the angular error
is at most 20 degrees. A class-matched pair that misses the threshold counts
as one false positive and one false negative. Per segment the counts fold
into substitutions S = min(FP, FN), deletions D = max(0, FN - FP) and
insertions I = max(0, FP - FN).

Localization is class-aware: every class-matched pair contributes its
angular error regardless of the threshold; LE is the mean of those errors
(180 degrees when there are none) and LR is the matched-pair count over the
reference count. The combined score is
(ER + (1 - F) + LE/180 + (1 - LR)) / 4. All ratios are micro-averaged:
counts are summed over the whole segment sequence before dividing.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

DOA_THRESHOLD_DEG = 20.0
FRAMES_PER_SEGMENT = 10  # 100 ms frames, 1 s segments


def angular_error(a, b):
    """Great-circle angle between two direction vectors, in degrees."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("zero vector has no direction")
    cos = np.clip(np.dot(a / na, b / nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def seld_combine(er, f, le_deg, lr):
    """Combined error: (ER + (1-F) + LE/180 + (1-LR)) / 4."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"F must be in [0, 1], got {f}")
    if not 0.0 <= lr <= 1.0:
        raise ValueError(f"LR must be in [0, 1], got {lr}")
    if not 0.0 <= le_deg <= 180.0:
        raise ValueError(f"LE must be in [0, 180] degrees, got {le_deg}")
    if er < 0.0:
        raise ValueError(f"ER must be nonnegative, got {er}")
    return (er + (1.0 - f) + le_deg / 180.0 + (1.0 - lr)) / 4.0


@dataclass
class MetricReport:
    er20: float
    f20: float
    le_cd: float
    lr_cd: float
    seld: float
    counts: dict

    def text(self):
        return "\n".join([
            f"ER_20deg : {self.er20:.4f}",
            f"F_20deg  : {100.0 * self.f20:.2f} %",
            f"LE_CD    : {self.le_cd:.2f} deg",
            f"LR_CD    : {100.0 * self.lr_cd:.2f} %",
            f"SELD     : {self.seld:.4f}",
        ])

    def csv_row(self):
        return {
            "er20": f"{self.er20:.6f}",
            "f20_pct": f"{100.0 * self.f20:.4f}",
            "le_cd_deg": f"{self.le_cd:.4f}",
            "lr_cd_pct": f"{100.0 * self.lr_cd:.4f}",
            "seld": f"{self.seld:.6f}",
        }


def frames_to_segments(activity, doa, threshold=0.5, frame_hop=0.1):
    """Collapse 100 ms frame outputs into per-second event sets.

    activity: (T, Y) scores, doa: (T, Y, 3). A class is active in a segment
    if any frame reaches the threshold; its direction is the normalized mean
    of the unit-normalized frame directions over the active frames. Works for
    both predictions (scores) and references (0/1 labels).
    """
    activity = np.asarray(activity)
    doa = np.asarray(doa)
    per_segment = int(round(1.0 / frame_hop))
    frames, num_classes = activity.shape
    segments = []
    for start in range(0, frames, per_segment):
        stop = min(start + per_segment, frames)
        events = []
        for cls in range(num_classes):
            act = activity[start:stop, cls] >= threshold
            if not np.any(act):
                continue
            vecs = doa[start:stop][act, cls, :]
            norms = np.linalg.norm(vecs, axis=1)
            vecs = vecs[norms > 1e-12] / norms[norms > 1e-12, None]
            if vecs.shape[0] == 0:
                continue  # active but directionless; nothing to report
            mean = vecs.mean(axis=0)
            mn = np.linalg.norm(mean)
            if mn < 1e-12:
                continue  # antipodal cancellation, no representative direction
            events.append((cls, mean / mn))
        segments.append(events)
    return segments


def _match_class(ref_vecs, pred_vecs):
    """Minimum-total-angular-error assignment between same-class instances."""
    if len(ref_vecs) == 1 and len(pred_vecs) == 1:
        return [(0, 0)]
    cost = np.array([[angular_error(r, p) for p in pred_vecs] for r in ref_vecs])
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def evaluate(ref_segments, pred_segments, threshold_deg=DOA_THRESHOLD_DEG):
    """Score a prediction segment sequence against the reference sequence."""
    if len(ref_segments) != len(pred_segments):
        raise ValueError(f"segment count mismatch: {len(ref_segments)} reference "
                         f"vs {len(pred_segments)} predicted")
    total_ref = sum(len(seg) for seg in ref_segments)
    if total_ref == 0:
        raise ValueError("empty reference: ER and LR are undefined")

    tp = fp = fn = 0
    s_total = d_total = i_total = 0
    pair_count = 0
    error_sum = 0.0
    for ref, pred in zip(ref_segments, pred_segments):
        classes = {cls for cls, _ in ref} | {cls for cls, _ in pred}
        seg_fp = seg_fn = 0
        for cls in classes:
            ref_vecs = [v for c, v in ref if c == cls]
            pred_vecs = [v for c, v in pred if c == cls]
            matched = 0
            if ref_vecs and pred_vecs:
                for ri, pi in _match_class(ref_vecs, pred_vecs):
                    err = angular_error(ref_vecs[ri], pred_vecs[pi])
                    error_sum += err
                    pair_count += 1
                    matched += 1
                    if err <= threshold_deg:
                        tp += 1
                    else:
                        seg_fp += 1
                        seg_fn += 1
            seg_fp += len(pred_vecs) - matched
            seg_fn += len(ref_vecs) - matched
        fp += seg_fp
        fn += seg_fn
        s_total += min(seg_fp, seg_fn)
        d_total += max(0, seg_fn - seg_fp)
        i_total += max(0, seg_fp - seg_fn)

    er = (s_total + d_total + i_total) / total_ref
    f = 2.0 * tp / (2.0 * tp + fp + fn)
    le = error_sum / pair_count if pair_count else 180.0
    lr = pair_count / total_ref
    return MetricReport(
        er20=er, f20=f, le_cd=le, lr_cd=lr,
        seld=seld_combine(er, f, le, lr),
        counts={"tp": tp, "fp": fp, "fn": fn, "s": s_total, "d": d_total,
                "i": i_total, "n_ref": total_ref, "pairs": pair_count},
    )


# ---------------------------------------------------------------------------
# event CSV files (one row per active class per 100 ms frame)

EVENT_FIELDS = ("clip_id", "frame_idx", "class_idx", "x", "y", "z")


def write_event_csv(path, rows):
    """rows: iterable of (clip_id, frame_idx, class_idx, (x, y, z))."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_FIELDS)
        for clip_id, frame_idx, class_idx, vec in rows:
            writer.writerow([clip_id, frame_idx, class_idx,
                             f"{vec[0]:.6f}", f"{vec[1]:.6f}", f"{vec[2]:.6f}"])


def read_event_csv(path):
    """Read back as {clip_id: [(frame_idx, class_idx, vec), ...]}."""
    clips = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(EVENT_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            vec = np.array([float(row["x"]), float(row["y"]), float(row["z"])])
            clips.setdefault(row["clip_id"], []).append(
                (int(row["frame_idx"]), int(row["class_idx"]), vec))
    return clips


def events_to_frame_arrays(rows, num_frames, num_classes):
    """Dense (T, Y) activity and (T, Y, 3) DOA arrays from event rows."""
    activity = np.zeros((num_frames, num_classes))
    doa = np.zeros((num_frames, num_classes, 3))
    for frame_idx, class_idx, vec in rows:
        if frame_idx >= num_frames or class_idx >= num_classes:
            raise ValueError(f"event row out of range: frame {frame_idx}, class {class_idx}")
        activity[frame_idx, class_idx] = 1.0
        doa[frame_idx, class_idx] = vec
    return activity, doa


def segments_from_csv(ref_clips, pred_clips, num_classes, frame_hop=0.1):
    """Aligned segment sequences for two event-row mappings.

    Clips are processed in sorted id order; each clip's frame extent is the
    largest frame index seen on either side, so trailing empty segments stay
    aligned between reference and prediction.
    """
    ref_all, pred_all = [], []
    for clip_id in sorted(set(ref_clips) | set(pred_clips)):
        ref_rows = ref_clips.get(clip_id, [])
        pred_rows = pred_clips.get(clip_id, [])
        last = max([r[0] for r in ref_rows + pred_rows], default=-1)
        frames = last + 1
        if frames == 0:
            continue
        for rows, bucket in ((ref_rows, ref_all), (pred_rows, pred_all)):
            act, doa = events_to_frame_arrays(rows, frames, num_classes)
            bucket.extend(frames_to_segments(act, doa, threshold=0.5, frame_hop=frame_hop))
    return ref_all, pred_all
