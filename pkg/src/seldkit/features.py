"""Multichannel audio front end: STFT, log-mel, FOA intensity, GCC-PHAT.

A 60 s 4-channel clip at 24 kHz becomes a 3000x64x7 tensor in FOA format
(4 log-mel channels + 3 normalized intensity components) or 3000x64x10 in
MIC format (4 log-mel channels + 6 pairwise GCC-PHAT lag vectors). Frames
use a 40 ms Hann window with a 20 ms hop; the clip tail is zero-padded so
the frame count is ceil(length / hop).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .audio import FOA, MIC, FORMATS, MultichannelClip

NUM_BANDS = 64
LOG_FLOOR = 1e-10
GCC_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

FEATURE_MAGIC = b"SELDFT1"
_FORMAT_TAGS = {FOA: 0, MIC: 1}
_TAG_FORMATS = {v: k for k, v in _FORMAT_TAGS.items()}


@dataclass
class StftConfig:
    window_len: int = 960   # 40 ms at 24 kHz
    hop_len: int = 480      # 20 ms
    fft_len: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if self.hop_len >= self.window_len:
            raise ValueError("hop_len must be smaller than window_len")
        if self.fft_len < self.window_len:
            raise ValueError("fft_len must be at least window_len")
        if self.window != "hann":
            raise ValueError("only the Hann window is supported")

    @property
    def num_bins(self):
        return self.fft_len // 2 + 1


def _hann(n):
    # periodic Hann, the usual analysis-window choice
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def num_frames(length, cfg):
    """Frames produced for a clip of `length` samples (tail zero-padded)."""
    if length < cfg.window_len:
        raise ValueError("clip too short: need at least one analysis window")
    return int(np.ceil(length / cfg.hop_len))


def stft(clip: MultichannelClip, cfg: StftConfig = None):
    """One-sided Hann STFT of all channels -> complex (T, fft_len/2+1, 4)."""
    cfg = cfg or StftConfig()
    x = np.asarray(clip.samples, dtype=np.float64)
    frames = num_frames(x.shape[1], cfg)
    padded_len = (frames - 1) * cfg.hop_len + cfg.window_len
    x = np.pad(x, ((0, 0), (0, padded_len - x.shape[1])))
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len, axis=1)
    view = view[:, ::cfg.hop_len, :]  # (4, T, window_len)
    windowed = view * _hann(cfg.window_len)
    spec = np.fft.rfft(windowed, n=cfg.fft_len, axis=-1)  # (4, T, bins)
    return spec.transpose(1, 2, 0)


@dataclass
class MelBank:
    """Triangular mel filters on FFT bin frequencies (HTK mel scale)."""

    weights: np.ndarray  # (num_bands, num_bins)
    centers_hz: np.ndarray
    f_min: float
    f_max: float

    @property
    def num_bands(self):
        return self.weights.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_bank(num_bands=NUM_BANDS, fft_len=1024, sample_rate=24000,
             f_min=50.0, f_max=None):
    f_max = f_max if f_max is not None else sample_rate / 2.0
    edges_hz = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), num_bands + 2))
    bin_hz = np.arange(fft_len // 2 + 1) * sample_rate / fft_len
    weights = np.zeros((num_bands, bin_hz.size))
    for b in range(num_bands):
        lo, center, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        weights[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return MelBank(weights=weights, centers_hz=edges_hz[1:-1], f_min=f_min, f_max=f_max)


def log_mel(spectrum, bank: MelBank, floor=LOG_FLOOR):
    """Log of floored mel-band power: ln(max(floor, filters . |X|^2))."""
    if spectrum.shape[1] != bank.weights.shape[1]:
        raise ValueError(f"spectrum has {spectrum.shape[1]} bins, "
                         f"bank expects {bank.weights.shape[1]}")
    power = np.abs(spectrum) ** 2
    band = np.einsum("tkc,bk->tbc", power, bank.weights)
    return np.log(np.maximum(floor, band))


def foa_intensity(spectrum, bank: MelBank):
    """Per mel band, the unit-normalized acoustic intensity vector.

    The per-bin vector Re(conj(W) * (X, Y, Z)) points toward the source under
    first-order encoding; it is pooled over each band with the band's filter
    weights and normalized per frame and band (zero vectors stay zero).
    """
    w = spectrum[:, :, 0]
    xyz = spectrum[:, :, 1:4]
    intensity = np.real(np.conj(w)[:, :, None] * xyz)  # (T, bins, 3)
    band = np.einsum("tkd,bk->tbd", intensity, bank.weights)
    norm = np.linalg.norm(band, axis=-1, keepdims=True)
    scale = np.where(norm < 1e-12, 0.0, 1.0 / np.maximum(norm, 1e-12))
    return band * scale


def gcc_phat(spectrum, num_lags=NUM_BANDS, fft_len=1024):
    """Phase-transform cross-correlation per frame for the 6 channel pairs.

    Whitened cross-spectra are inverse-transformed and center-cropped to
    ``num_lags`` lags around zero; index num_lags//2 is lag 0 and a positive
    lag means the second channel of the pair lags the first. The lag-domain
    values are bounded by 1 in magnitude.
    """
    half = num_lags // 2
    t = spectrum.shape[0]
    out = np.empty((t, num_lags, len(GCC_PAIRS)))
    for p, (i, j) in enumerate(GCC_PAIRS):
        cross = np.conj(spectrum[:, :, i]) * spectrum[:, :, j]
        mag = np.abs(cross)
        cross = cross / np.maximum(mag, 1e-30)
        cross[mag < 1e-30] = 0.0  # silent bins contribute nothing
        cc = np.fft.irfft(cross, n=fft_len, axis=1)
        out[:, :, p] = np.concatenate([cc[:, -half:], cc[:, :half]], axis=1)
    return out


@dataclass
class FeatureTensor:
    """T x F x C feature image with its frame hop and channel roles."""

    data: np.ndarray  # (T, 64, C) float32
    frame_hop: float  # seconds
    channel_layout: tuple
    format: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("feature data must be T x F x C")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature tensor contains non-finite values")

    @property
    def num_frames(self):
        return self.data.shape[0]

    @property
    def num_channels(self):
        return self.data.shape[2]


_FOA_LAYOUT = ("logmel_w", "logmel_x", "logmel_y", "logmel_z",
               "intensity_x", "intensity_y", "intensity_z")
_MIC_LAYOUT = ("logmel_0", "logmel_1", "logmel_2", "logmel_3",
               "gcc_01", "gcc_02", "gcc_03", "gcc_12", "gcc_13", "gcc_23")


def featurize(clip: MultichannelClip, cfg: StftConfig = None, bank: MelBank = None,
              floor=LOG_FLOOR):
    """Full front end: log-mel plus intensity (FOA) or GCC-PHAT (MIC)."""
    cfg = cfg or StftConfig()
    bank = bank or mel_bank(fft_len=cfg.fft_len, sample_rate=clip.sample_rate)
    spectrum = stft(clip, cfg)
    mel = log_mel(spectrum, bank, floor=floor)
    if clip.format == FOA:
        phase = foa_intensity(spectrum, bank)
        layout = _FOA_LAYOUT
    else:
        phase = gcc_phat(spectrum, num_lags=bank.num_bands, fft_len=cfg.fft_len)
        layout = _MIC_LAYOUT
    data = np.concatenate([mel, phase], axis=2)
    return FeatureTensor(data=data, frame_hop=cfg.hop_len / clip.sample_rate,
                         channel_layout=layout, format=clip.format)


def write_feature_file(path, ft: FeatureTensor):
    """Binary feature file: SELDFT1 magic, u32 T/F/C, u8 format tag, f32 data."""
    t, f, c = ft.data.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIB", t, f, c, _FORMAT_TAGS[ft.format]))
        fh.write(np.ascontiguousarray(ft.data, dtype="<f4").tobytes())


def read_feature_file(path, frame_hop=0.02):
    with open(path, "rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise ValueError(f"not a feature file (bad magic): {path}")
        t, f, c, tag = struct.unpack("<IIIB", fh.read(13))
        if tag not in _TAG_FORMATS:
            raise ValueError(f"unknown format tag {tag} in {path}")
        fmt = _TAG_FORMATS[tag]
        data = np.frombuffer(fh.read(4 * t * f * c), dtype="<f4")
        if data.size != t * f * c:
            raise ValueError(f"truncated feature file: {path}")
    layout = _FOA_LAYOUT if fmt == FOA else _MIC_LAYOUT
    return FeatureTensor(data=data.reshape(t, f, c).copy(), frame_hop=frame_hop,
                         channel_layout=layout, format=fmt)
