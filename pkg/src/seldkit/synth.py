"""Deterministic synthetic spatial-audio clips with frame-level ground truth.

Each class has a fixed parametric signature (harmonic complex, band-limited
noise, or chirp, cycled by class index with class-specific frequencies).
Events are placed so that no more than ``max_overlap`` run at once and a
class never overlaps itself. Rendering is anechoic: FOA uses first-order
plane-wave encoding (W carries 1/sqrt(2) of the source signal, X/Y/Z the
direction cosines), MIC applies per-channel fractional delays for a regular
tetrahedral array of 4.2 cm radius via windowed-sinc interpolation. Moving
sources interpolate azimuth/elevation linearly over the event.

All randomness derives from (seed, clip index), so generation order and
parallelism cannot change the output.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .audio import FOA, MIC, FORMATS, SAMPLE_RATE, MultichannelClip

SPEED_OF_SOUND = 343.0
ARRAY_RADIUS = 0.042
LABEL_HOP = 0.1  # seconds per label frame
MAX_CLASSES = 14

# regular tetrahedron vertices scaled to the array radius, (4, 3)
_TETRA = np.array([[1.0, 1.0, 1.0],
                   [1.0, -1.0, -1.0],
                   [-1.0, 1.0, -1.0],
                   [-1.0, -1.0, 1.0]]) / np.sqrt(3.0) * ARRAY_RADIUS


@dataclass
class EventSpec:
    class_idx: int
    onset: float
    duration: float
    azimuth: tuple    # (start, end) degrees
    elevation: tuple  # (start, end) degrees
    snr_db: float

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError("onset must be nonnegative")
        if not all(-90.0 <= e <= 90.0 for e in self.elevation):
            raise ValueError("elevation must be within [-90, 90] degrees")


@dataclass
class LabelSequence:
    activity: np.ndarray  # (frames, Y) in {0, 1}
    doa: np.ndarray       # (frames, Y, 3), unit rows where active

    @property
    def num_frames(self):
        return self.activity.shape[0]

    @property
    def num_classes(self):
        return self.activity.shape[1]


def direction_vector(az_deg, el_deg):
    az = np.deg2rad(np.asarray(az_deg, dtype=float))
    el = np.deg2rad(np.asarray(el_deg, dtype=float))
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


# ---------------------------------------------------------------------------
# class signatures


def _class_params(class_idx):
    kind = class_idx % 3
    step = class_idx // 3
    if kind == 0:    # harmonic complex
        return {"kind": "harmonic", "f0": 160.0 * (1.30 ** class_idx),
                "decay": 0.5 + 0.09 * step, "am": 2.0 + 1.5 * step}
    if kind == 1:    # band-limited noise
        center = 500.0 * (1.55 ** step)
        return {"kind": "noise", "center": center, "width": 0.35 * center + 120.0}
    chirp_lo = 300.0 * (1.5 ** step)
    return {"kind": "chirp", "f_lo": chirp_lo, "f_hi": min(3.4 * chirp_lo, 9000.0)}


def event_signal(class_idx, n_samples, rng, sample_rate=SAMPLE_RATE):
    """Mono source signal for one event, unit RMS, 10 ms edge ramps."""
    p = _class_params(class_idx)
    t = np.arange(n_samples) / sample_rate
    if p["kind"] == "harmonic":
        sig = np.zeros(n_samples)
        phase = rng.uniform(0, 2 * np.pi, size=5)
        for h in range(1, 6):
            f = p["f0"] * h
            if f >= 0.38 * sample_rate:
                break
            sig += p["decay"] ** (h - 1) * np.sin(2 * np.pi * f * t + phase[h - 1])
        sig *= 1.0 + 0.3 * np.sin(2 * np.pi * p["am"] * t)
    elif p["kind"] == "noise":
        white = rng.standard_normal(n_samples)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
        envelope = np.exp(-0.5 * ((freqs - p["center"]) / p["width"]) ** 2)
        sig = np.fft.irfft(spec * envelope, n=n_samples)
    else:
        inst = p["f_lo"] + (p["f_hi"] - p["f_lo"]) * t / t[-1] if n_samples > 1 else p["f_lo"]
        phase = 2 * np.pi * np.cumsum(inst) / sample_rate
        sig = np.sin(phase + rng.uniform(0, 2 * np.pi))
    ramp = min(int(0.01 * sample_rate), n_samples // 4)
    if ramp > 0:
        window = 0.5 * (1 - np.cos(np.pi * np.arange(ramp) / ramp))
        sig[:ramp] *= window
        sig[-ramp:] *= window[::-1]
    rms = np.sqrt(np.mean(sig ** 2))
    return sig / max(rms, 1e-12)


# ---------------------------------------------------------------------------
# fractional delay


def fractional_shift(signal, shift, taps=8):
    """Evaluate signal(n + shift) with a Hann-windowed sinc interpolator.

    ``shift`` is a scalar or per-sample array in samples; positive values
    advance the signal. Accurate to well under a sample for content below
    ~80% of Nyquist.
    """
    n = signal.size
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (n,))
    pad = taps + int(np.ceil(np.abs(shift).max())) + 1
    padded = np.pad(signal, (pad, pad))
    pos = np.arange(n) + shift + pad
    base = np.floor(pos).astype(int)
    frac = pos - base
    out = np.zeros(n)
    for k in range(-taps + 1, taps + 1):
        u = frac - k
        w = np.sinc(u) * (0.5 + 0.5 * np.cos(np.pi * u / taps))
        out += padded[base + k] * w
    return out


# ---------------------------------------------------------------------------
# rendering


def _event_trajectory(event, n_samples, sample_rate):
    """Per-sample unit direction over the event span."""
    frac = np.arange(n_samples) / max(n_samples - 1, 1)
    az = event.azimuth[0] + (event.azimuth[1] - event.azimuth[0]) * frac
    el = event.elevation[0] + (event.elevation[1] - event.elevation[0]) * frac
    return direction_vector(az, el)


def render_event(event, fmt, clip_buffer, rng, sample_rate=SAMPLE_RATE,
                 noise_rms=0.01):
    """Add one spatialized event into the (4, length) clip buffer."""
    start = int(round(event.onset * sample_rate))
    n = int(round(event.duration * sample_rate))
    n = min(n, clip_buffer.shape[1] - start)
    if n <= 0:
        return
    sig = event_signal(event.class_idx, n, rng, sample_rate)
    sig *= noise_rms * 10.0 ** (event.snr_db / 20.0)
    d = _event_trajectory(event, n, sample_rate)
    if fmt == FOA:
        clip_buffer[0, start:start + n] += sig / np.sqrt(2.0)
        for c in range(3):
            clip_buffer[1 + c, start:start + n] += d[:, c] * sig
    else:
        for m in range(4):
            advance = (_TETRA[m] @ d.T) * sample_rate / SPEED_OF_SOUND
            clip_buffer[m, start:start + n] += fractional_shift(sig, advance)


def geometric_peak_lag(pair, az_deg, el_deg, sample_rate=SAMPLE_RATE):
    """Expected GCC-PHAT lag in samples for a mic pair and source direction.

    With channel j delayed relative to channel i by (p_i - p_j) . d / c, the
    correlation peak sits at that delay on the positive-lag-means-j-lags-i
    axis.
    """
    i, j = pair
    d = direction_vector(az_deg, el_deg)
    return float((_TETRA[i] - _TETRA[j]) @ d * sample_rate / SPEED_OF_SOUND)


# ---------------------------------------------------------------------------
# event placement and labels


def _place_events(rng, num_classes, clip_len, max_overlap, density=0.25):
    """Draw events until the target density is reached; bounded retries."""
    target = max(2, int(round(clip_len * density)))
    events = []
    spans = []  # (onset, offset, class)
    attempts_left = 200 * target
    while len(events) < target:
        if attempts_left <= 0:
            raise ValueError("could not place events within the overlap constraints")
        attempts_left -= 1
        duration = float(rng.uniform(1.2, 3.2))
        if duration >= clip_len:
            duration = clip_len * 0.5
        onset = float(rng.uniform(0.0, clip_len - duration))
        cls = int(rng.integers(num_classes))
        # same-class events must not overlap (labels hold one DOA per class)
        clash = any(c == cls and onset < off + LABEL_HOP and on - LABEL_HOP < onset + duration
                    for on, off, c in spans)
        if clash:
            continue
        # concurrency cap across all classes, exact interval cover count
        bounds = [onset, onset + duration]
        bounds += [b for on, off, _ in spans for b in (on, off)
                   if onset < b < onset + duration]
        bounds.sort()
        cover = max(1 + sum(1 for on, off, _ in spans if on < (a + b) / 2 < off)
                    for a, b in zip(bounds[:-1], bounds[1:]))
        if cover > max_overlap:
            continue
        az0 = float(rng.uniform(-180.0, 180.0))
        el0 = float(rng.uniform(-50.0, 50.0))
        if rng.random() < 0.35:  # moving source
            az1 = az0 + float(rng.uniform(-70.0, 70.0))
            el1 = float(np.clip(el0 + rng.uniform(-30.0, 30.0), -60.0, 60.0))
        else:
            az1, el1 = az0, el0
        events.append(EventSpec(class_idx=cls, onset=onset, duration=duration,
                                azimuth=(az0, az1), elevation=(el0, el1),
                                snr_db=float(rng.uniform(22.0, 30.0))))
        spans.append((onset, onset + duration, cls))
    events.sort(key=lambda e: e.onset)
    return events


def labels_for_events(events, num_classes, clip_len):
    frames = int(round(clip_len / LABEL_HOP))
    activity = np.zeros((frames, num_classes))
    doa = np.zeros((frames, num_classes, 3))
    for ev in events:
        for t in range(frames):
            center = (t + 0.5) * LABEL_HOP
            if ev.onset <= center < ev.onset + ev.duration:
                frac = (center - ev.onset) / ev.duration
                az = ev.azimuth[0] + (ev.azimuth[1] - ev.azimuth[0]) * frac
                el = ev.elevation[0] + (ev.elevation[1] - ev.elevation[0]) * frac
                activity[t, ev.class_idx] = 1.0
                doa[t, ev.class_idx] = direction_vector(az, el)
    return LabelSequence(activity=activity, doa=doa)


def generate_clip(seed, fmt, num_classes=4, clip_len=12.0, max_overlap=2,
                  noise_rms=0.01):
    """Deterministic (clip, labels) pair; labels are format-independent."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}]")
    layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    events = _place_events(layout_rng, num_classes, clip_len, max_overlap)
    labels = labels_for_events(events, num_classes, clip_len)
    length = int(round(clip_len * SAMPLE_RATE))
    buffer = np.zeros((4, length))
    for k, ev in enumerate(events):
        # per-event stream, format-independent, so FOA/MIC share source signals
        ev_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, k]))
        render_event(ev, fmt, buffer, ev_rng, noise_rms=noise_rms)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    buffer += noise_rng.normal(0.0, noise_rms, size=buffer.shape)
    clip = MultichannelClip(samples=buffer, sample_rate=SAMPLE_RATE, format=fmt)
    return clip, labels, events


def single_event_clip(event, fmt, clip_len, seed=0, num_classes=None, noise_rms=0.01):
    """One controlled event in an otherwise noise-only clip (for DOA checks)."""
    num_classes = num_classes or event.class_idx + 1
    length = int(round(clip_len * SAMPLE_RATE))
    buffer = np.zeros((4, length))
    ev_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, 0]))
    render_event(event, fmt, buffer, ev_rng, noise_rms=noise_rms)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    buffer += noise_rng.normal(0.0, noise_rms, size=buffer.shape)
    clip = MultichannelClip(samples=buffer, sample_rate=SAMPLE_RATE, format=fmt)
    return clip, labels_for_events([event], num_classes, clip_len)


def clip_seed(dataset_seed, index):
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def dataset(seed, n_clips, split_ratios=(0.5, 0.25, 0.25)):
    """Deterministic split assignment: {split: [(clip_id, seed), ...]}."""
    ratios = tuple(float(r) for r in split_ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("split_ratios must be three nonnegative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split_ratios must sum to 1, got {sum(ratios)}")
    counts = [int(np.floor(r * n_clips)) for r in ratios]
    for i in range(n_clips - sum(counts)):  # leftover clips go left to right
        counts[i % 3] += 1
    splits = {"train": [], "val": [], "test": []}
    names = ("train", "val", "test")
    idx = 0
    for name, count in zip(names, counts):
        for _ in range(count):
            splits[name].append((f"clip{idx:04d}", clip_seed(seed, idx)))
            idx += 1
    return splits


# ---------------------------------------------------------------------------
# on-disk dataset layout


def label_rows(clip_id, labels: LabelSequence):
    rows = []
    for t in range(labels.num_frames):
        for cls in range(labels.num_classes):
            if labels.activity[t, cls] > 0:
                rows.append((clip_id, t, cls, labels.doa[t, cls]))
    return rows


def write_manifest(path, entries):
    """entries: iterable of dicts with clip_id, split, format, seed."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["clip_id", "split", "format", "seed"])
        writer.writeheader()
        for entry in entries:
            writer.writerow(entry)


def write_dataset(out_dir, seed, n_clips, fmt, num_classes=4, clip_len=12.0,
                  split_ratios=(0.5, 0.25, 0.25), max_overlap=2, log=None):
    """Generate a dataset directory: manifest, dataset.cfg, wav/, labels/."""
    from pathlib import Path

    from .audio import write_wav_clip
    from .metrics import write_event_csv

    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    splits = dataset(seed, n_clips, split_ratios)
    entries = []
    for split, members in splits.items():
        for cid, cseed in members:
            clip, labels, _ = generate_clip(cseed, fmt, num_classes=num_classes,
                                            clip_len=clip_len, max_overlap=max_overlap)
            write_wav_clip(out_dir / "wav" / f"{cid}.wav", clip)
            write_event_csv(out_dir / "labels" / f"{cid}.csv", label_rows(cid, labels))
            entries.append({"clip_id": cid, "split": split, "format": fmt, "seed": cseed})
            if log:
                log(f"wrote {cid} ({split}, {fmt})")
    entries.sort(key=lambda e: e["clip_id"])
    write_manifest(out_dir / "manifest.csv", entries)
    with open(out_dir / "dataset.cfg", "w") as fh:
        fh.write(f"seed={seed}\nn_clips={n_clips}\nformat={fmt}\n"
                 f"num_classes={num_classes}\nclip_len={clip_len!r}\n"
                 f"max_overlap={max_overlap}\n")
    return out_dir / "manifest.csv"


def read_dataset_config(data_dir):
    from pathlib import Path
    values = {}
    for line in (Path(data_dir) / "dataset.cfg").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return {"seed": int(values["seed"]), "n_clips": int(values["n_clips"]),
            "format": values["format"], "num_classes": int(values["num_classes"]),
            "clip_len": float(values["clip_len"]),
            "max_overlap": int(values.get("max_overlap", 2))}


def read_manifest(path):
    with open(path, newline="") as fh:
        entries = list(csv.DictReader(fh))
    for entry in entries:
        entry["seed"] = int(entry["seed"])
    return entries
