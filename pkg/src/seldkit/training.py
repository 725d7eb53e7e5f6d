"""Training loop, schedule, augmentation, inference and model selection.

Training samples one random segment per clip per epoch (more with
``segments_per_clip``), standardizes features with per-channel statistics
from the training split, optionally applies one time mask and one frequency
mask per segment, and optimizes with Adam under a warmup + milestone-decay
schedule. When a validation split is present, the snapshot with the lowest
validation SELD score is retained; otherwise the final snapshot is kept.
Inference runs 2-second windows (100 input frames -> 20 output frames)
without overlap and no post-processing; activity >= 0.5 counts as active.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .features import featurize
from .losses import CE_PLUS_MSE, LossConfig, ce_mse_loss, compute_loss, mse_loss
from .metrics import evaluate, frames_to_segments
from .model import ModelConfig, Predictions, SeldModel, config_from_text, config_to_text
from .synth import LabelSequence

INFER_WINDOW_FRAMES = 100  # 2 s of 20 ms feature frames
ACTIVITY_THRESHOLD = 0.5   # >= threshold means active
FRAMES_PER_LABEL = 5       # feature frames per 100 ms output frame


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 10000
    minibatch: int = 64
    segment_frames: int = 600
    lr_init: float = 2e-4
    warmup_epochs: int = 10
    warmup_lr: float = 2e-5
    decay_rate: float = 0.8
    decay_epochs: tuple = (200, 600, 1000)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 1
    augment: bool = True
    scale_factor: int = 1
    segments_per_clip: int = 1
    val_every: int = 1

    def __post_init__(self):
        if self.warmup_lr >= self.lr_init:
            raise ValueError("warmup_lr must be below lr_init")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be increasing")
        if self.segment_frames % FRAMES_PER_LABEL:
            raise ValueError("segment_frames must be a multiple of 5")


def desk_preset(**overrides):
    """Small-scale defaults: scale 8, 2 s segments, small batches."""
    base = dict(epochs=300, minibatch=8, segment_frames=100, scale_factor=8,
                segments_per_clip=2)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(epoch, cfg: TrainConfig):
    """Warmup rate before warmup_epochs, then milestone decay of lr_init."""
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr
    passed = sum(1 for m in cfg.decay_epochs if epoch > m)
    return cfg.lr_init * cfg.decay_rate ** passed


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class ClipData:
    clip_id: str
    features: np.ndarray        # (Tc, F, C) raw features
    labels: LabelSequence


def compute_feature_stats(clips):
    """Per-channel mean/std over every frame and band of the given clips."""
    stacked = np.concatenate([c.features.reshape(-1, c.features.shape[2])
                              for c in clips], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(features, stats):
    mean, std = stats
    return ((features - mean) / std).astype(np.float32)


def sample_segment(features, labels: LabelSequence, frames, rng):
    """Random contiguous crop of `frames` feature frames with aligned labels.

    Offsets land on the 100 ms label grid so the label crop is exact.
    """
    total = features.shape[0]
    if total < frames:
        raise ValueError(f"clip too short: {total} frames < segment {frames}")
    max_offset = (total - frames) // FRAMES_PER_LABEL
    offset = int(rng.integers(0, max_offset + 1)) * FRAMES_PER_LABEL
    lo, label_lo = offset, offset // FRAMES_PER_LABEL
    label_hi = label_lo + frames // FRAMES_PER_LABEL
    return (features[lo:lo + frames],
            labels.activity[label_lo:label_hi],
            labels.doa[label_lo:label_hi])


def augment_segment(features, rng, max_time_frac=0.1, max_freq_bands=8):
    """One time mask and one frequency mask, zeroed across all channels."""
    out = features.copy()
    frames, bands, _ = out.shape
    t_width = int(rng.integers(0, int(max_time_frac * frames) + 1))
    t0 = int(rng.integers(0, frames - t_width + 1))
    out[t0:t0 + t_width, :, :] = 0.0
    f_width = int(rng.integers(0, max_freq_bands + 1))
    f0 = int(rng.integers(0, bands - f_width + 1))
    out[:, f0:f0 + f_width, :] = 0.0
    return out


# ---------------------------------------------------------------------------
# inference


def infer_clip(model: SeldModel, stats, features, window=INFER_WINDOW_FRAMES):
    """Window-tiled inference over one clip's raw features -> Predictions.

    Windows cover every output frame exactly once; a short tail window is
    zero-padded and its outputs trimmed.
    """
    feats = standardize(features, stats)
    total = feats.shape[0]
    n_windows = int(np.ceil(total / window))
    padded = np.zeros((n_windows * window,) + feats.shape[1:], dtype=np.float32)
    padded[:total] = feats
    batch = padded.reshape(n_windows, window, *feats.shape[1:])
    act, doa = model.forward(batch, mode="infer")
    out_frames = total // FRAMES_PER_LABEL
    activity = act.data.reshape(-1, act.data.shape[-1])[:out_frames]
    doa_arr = doa.data.reshape(-1, *doa.data.shape[-2:])[:out_frames]
    return Predictions(activity=activity, doa=doa_arr)


def prediction_rows(clip_id, preds: Predictions, threshold=ACTIVITY_THRESHOLD):
    """Event CSV rows for active cells; directions renormalized to the sphere."""
    rows = []
    frames, classes = preds.activity.shape
    for t in range(frames):
        for cls in range(classes):
            if preds.activity[t, cls] >= threshold:
                vec = preds.doa[t, cls].astype(float)
                norm = np.linalg.norm(vec)
                if norm > 1e-12:
                    vec = vec / norm
                rows.append((clip_id, t, cls, vec))
    return rows


def evaluate_model(model, stats, clips, threshold=ACTIVITY_THRESHOLD):
    """Full joint-metric report over a list of ClipData."""
    ref_segments, pred_segments = [], []
    for clip in clips:
        preds = infer_clip(model, stats, clip.features)
        pred_segments.extend(frames_to_segments(preds.activity, preds.doa,
                                                threshold=threshold))
        ref_segments.extend(frames_to_segments(clip.labels.activity, clip.labels.doa,
                                               threshold=0.5))
    return evaluate(ref_segments, pred_segments)


def frame_error_stats(model, stats, clips, ce_eps=1e-7):
    """Frame-level diagnostics in infer mode over whole clips.

    Returns mse_loss / ce_loss values (both computed regardless of the
    training loss) plus the frame-level detection error rate and the mean
    angular error over reference-active cells, in degrees.
    """
    act_pred, doa_pred, act_true, doa_true = [], [], [], []
    for clip in clips:
        preds = infer_clip(model, stats, clip.features)
        frames = preds.activity.shape[0]
        act_pred.append(preds.activity)
        doa_pred.append(preds.doa)
        act_true.append(clip.labels.activity[:frames])
        doa_true.append(clip.labels.doa[:frames])
    act_p = np.concatenate(act_pred)[None]
    doa_p = np.concatenate(doa_pred)[None]
    act_t = np.concatenate(act_true)[None]
    doa_t = np.concatenate(doa_true)[None]

    mse = mse_loss(ad.Tensor(act_p), ad.Tensor(doa_p), act_t, doa_t)
    ce = ce_mse_loss(ad.Tensor(act_p), ad.Tensor(doa_p), act_t, doa_t,
                     LossConfig(kind=CE_PLUS_MSE, w_ce=1.0, w_mse=0.0, ce_clip_eps=ce_eps))

    decisions = act_p[0] >= ACTIVITY_THRESHOLD
    truth = act_t[0] > 0.5
    fp = np.sum(decisions & ~truth, axis=1).astype(float)
    fn = np.sum(~decisions & truth, axis=1).astype(float)
    n_ref = truth.sum()
    sed_err = float(np.sum(np.minimum(fp, fn) + np.abs(fp - fn)) / max(n_ref, 1))

    errors = []
    pred_vecs = doa_p[0][truth]
    true_vecs = doa_t[0][truth]
    for pv, tv in zip(pred_vecs, true_vecs):
        pn = np.linalg.norm(pv)
        if pn < 1e-12:
            errors.append(180.0)
            continue
        cos = np.clip(np.dot(pv / pn, tv), -1.0, 1.0)
        errors.append(float(np.degrees(np.arccos(cos))))
    doa_err = float(np.mean(errors)) if errors else 180.0
    return {"mse_loss": float(mse.total.data), "ce_loss": float(ce.sed_term.data),
            "sed_err": sed_err, "doa_err": doa_err}


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_records(model: SeldModel, stats, adam_state):
    records = {}
    for name, p in model.params.items():
        records[name] = p.data
    for name, st in model.bn_states.items():
        records[f"bnstate.{name}.mean"] = st.mean
        records[f"bnstate.{name}.var"] = st.var
        records[f"bnstate.{name}.count"] = np.array(float(st.count))
    records["featstats.mean"] = stats[0]
    records["featstats.std"] = stats[1]
    if adam_state is not None:
        records["adam.step"] = np.array(float(adam_state.step))
        for name in model.params:
            records[f"adam.m.{name}"] = adam_state.m[name]
            records[f"adam.v.{name}"] = adam_state.v[name]
    return records


def save_checkpoint(path, model, stats, adam_state=None, extra=None):
    ckpt.write_records(path, checkpoint_records(model, stats, adam_state))
    sidecar = Path(path).with_suffix(".cfg")
    sidecar.write_text(config_to_text(model.cfg, extra=extra))


def load_checkpoint(path):
    """Rebuild a model (and feature stats) from a checkpoint + sidecar."""
    records = ckpt.read_records(path)
    cfg, extra = config_from_text(Path(path).with_suffix(".cfg").read_text())
    model = SeldModel(cfg, rng=np.random.default_rng(0))
    for name, p in model.params.items():
        if name not in records:
            raise ValueError(f"checkpoint missing parameter {name}")
        if tuple(records[name].shape) != tuple(p.data.shape):
            raise ValueError(f"checkpoint shape mismatch for {name}")
        p.data = records[name].astype(model.dtype)
    for name, st in model.bn_states.items():
        st.mean = records[f"bnstate.{name}.mean"].astype(model.dtype)
        st.var = records[f"bnstate.{name}.var"].astype(model.dtype)
        st.count = int(records[f"bnstate.{name}.count"])
    stats = (records["featstats.mean"], records["featstats.std"])
    return model, stats, extra


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    model: SeldModel
    stats: tuple
    best_epoch: int
    best_seld: float
    checkpoint_path: Path
    loss_rows: list
    val_rows: list
    diag_rows: list


def _format_float(v):
    return f"{v:.10g}"


def train(train_clips, val_clips, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir, diagnostics=None, log=None, figures=True):
    """Train a model; writes checkpoint, loss/metric CSVs and a curve figure.

    ``diagnostics`` maps split names to clip lists evaluated with
    :func:`frame_error_stats` after every epoch (used by the loss-comparison
    experiment). Returns a TrainResult.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_clips:
        raise ValueError("no training clips")

    stats = compute_feature_stats(train_clips)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    run_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
    model = SeldModel(model_cfg, rng=init_rng)
    adam = ad.AdamState(model.params)

    normalized = [standardize(c.features, stats) for c in train_clips]
    loss_rows = []
    val_rows = []
    diag_rows = []
    best_seld = np.inf
    best_epoch = -1
    best_snapshot = None
    best_adam = None

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        pool = [i for i in range(len(train_clips)) for _ in range(cfg.segments_per_clip)]
        order = run_rng.permutation(len(pool))
        epoch_terms = np.zeros(3)
        batches = 0
        for start in range(0, len(order), cfg.minibatch):
            members = [pool[i] for i in order[start:start + cfg.minibatch]]
            xs, acts, doas = [], [], []
            for idx in members:
                seg, act, doa = sample_segment(normalized[idx], train_clips[idx].labels,
                                               cfg.segment_frames, run_rng)
                if cfg.augment:
                    seg = augment_segment(seg, run_rng)
                xs.append(seg)
                acts.append(act)
                doas.append(doa)
            x = np.stack(xs)
            act_t = np.stack(acts)
            doa_t = np.stack(doas)
            act_p, doa_p = model.forward(x, mode="train", rng=run_rng)
            loss = compute_loss(act_p, doa_p, act_t, doa_t, cfg.loss)
            total, sed, doa = loss.values()
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} (sed={sed}, doa={doa}); "
                    f"lr={lr}, loss={cfg.loss.label()}")
            ad.zero_grads(model.params)
            loss.total.backward()
            ad.adam_step(model.params, adam, lr)
            epoch_terms += (total, sed, doa)
            batches += 1
        epoch_terms /= max(batches, 1)
        loss_rows.append({"epoch": epoch, "split": "train", "kind": cfg.loss.kind,
                          "w_ce": cfg.loss.w_ce, "w_mse": cfg.loss.w_mse,
                          "sed_term": epoch_terms[1], "doa_term": epoch_terms[2],
                          "total": epoch_terms[0]})

        last = epoch == cfg.epochs - 1
        if val_clips and ((epoch + 1) % cfg.val_every == 0 or last):
            report = evaluate_model(model, stats, val_clips)
            val_rows.append({"epoch": epoch, "er20": report.er20, "f20": report.f20,
                             "le_cd": report.le_cd, "lr_cd": report.lr_cd,
                             "seld": report.seld})
            if report.seld < best_seld:
                best_seld = report.seld
                best_epoch = epoch
                best_snapshot = model.snapshot()
                best_adam = ({k: v.copy() for k, v in adam.m.items()},
                             {k: v.copy() for k, v in adam.v.items()}, adam.step)
        if diagnostics:
            row = {"epoch": epoch}
            for split, clips in diagnostics.items():
                for key, value in frame_error_stats(model, stats, clips).items():
                    row[f"{split}_{key}"] = value
            diag_rows.append(row)
        if log and (epoch % 25 == 0 or last):
            msg = (f"epoch {epoch:4d} lr={lr:.2e} loss={epoch_terms[0]:.5f} "
                   f"(sed={epoch_terms[1]:.5f} doa={epoch_terms[2]:.5f})")
            if val_rows and val_clips:
                msg += f" val_seld={val_rows[-1]['seld']:.4f}"
            log(msg)

    if best_snapshot is not None:
        model.restore(best_snapshot)
        adam.m, adam.v, adam.step = ({k: v.copy() for k, v in best_adam[0].items()},
                                     {k: v.copy() for k, v in best_adam[1].items()},
                                     best_adam[2])
    else:
        best_epoch = cfg.epochs - 1
        best_seld = val_rows[-1]["seld"] if val_rows else float("nan")

    with open(out_dir / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "kind", "w_ce", "w_mse",
                         "sed_term", "doa_term", "total"])
        for row in loss_rows:
            writer.writerow([row["epoch"], row["split"], row["kind"],
                             _format_float(row["w_ce"]), _format_float(row["w_mse"]),
                             _format_float(row["sed_term"]), _format_float(row["doa_term"]),
                             _format_float(row["total"])])
    if val_rows:
        with open(out_dir / "val_metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "er20", "f20", "le_cd", "lr_cd", "seld"])
            for row in val_rows:
                writer.writerow([row["epoch"]] + [_format_float(row[k])
                                                  for k in ("er20", "f20", "le_cd",
                                                            "lr_cd", "seld")])

    checkpoint_path = out_dir / "checkpoint.ckpt"
    extra = {"format": "unknown", "loss": cfg.loss.label(),
             "best_epoch": best_epoch, "train_seed": cfg.seed}
    save_checkpoint(checkpoint_path, model, stats, adam, extra=extra)

    if figures:
        from .plots import plot_training_curves
        plot_training_curves(loss_rows, val_rows, out_dir / "train_curves.svg")

    return TrainResult(model=model, stats=stats, best_epoch=best_epoch,
                       best_seld=best_seld, checkpoint_path=checkpoint_path,
                       loss_rows=loss_rows, val_rows=val_rows, diag_rows=diag_rows)


# ---------------------------------------------------------------------------
# dataset-directory loading (the layout written by synth.write_dataset)


def load_split_clips(data_dir, split, use_feature_files=True):
    """ClipData list for one split of an on-disk dataset."""
    from .audio import read_wav_clip
    from .features import read_feature_file
    from .metrics import events_to_frame_arrays, read_event_csv
    from .synth import read_dataset_config, read_manifest

    data_dir = Path(data_dir)
    entries = [e for e in read_manifest(data_dir / "manifest.csv") if e["split"] == split]
    ds_cfg = read_dataset_config(data_dir)
    num_classes = ds_cfg["num_classes"]
    label_frames = int(round(ds_cfg["clip_len"] / 0.1))
    clips = []
    for entry in entries:
        cid = entry["clip_id"]
        ft_path = data_dir / "features" / f"{cid}.ft"
        if use_feature_files and ft_path.exists():
            feats = read_feature_file(ft_path).data
        else:
            clip = read_wav_clip(data_dir / "wav" / f"{cid}.wav", entry["format"])
            feats = featurize(clip).data
        rows = read_event_csv(data_dir / "labels" / f"{cid}.csv").get(cid, [])
        activity, doa = events_to_frame_arrays(rows, label_frames, num_classes)
        clips.append(ClipData(clip_id=cid, features=feats,
                              labels=LabelSequence(activity=activity, doa=doa)))
    return clips
