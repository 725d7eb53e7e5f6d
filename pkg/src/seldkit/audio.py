"""Multichannel clips and 4-channel WAV input/output.

Clips are held as (4, length) float arrays in [-1, 1]. FOA WAVs are stored
on disk in ACN channel order (W, Y, Z, X) and remapped to the internal
(W, X, Y, Z) order on load; MIC WAVs keep their channel order.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

FOA = "foa"
MIC = "mic"
FORMATS = (FOA, MIC)
SAMPLE_RATE = 24000

# disk (ACN) index for each internal channel W, X, Y, Z
_ACN_TO_INTERNAL = (0, 3, 1, 2)
_INTERNAL_TO_ACN = (0, 2, 3, 1)


@dataclass
class MultichannelClip:
    """A 4-channel audio clip in internal channel order."""

    samples: np.ndarray  # (4, length)
    sample_rate: int
    format: str
    channel_count: int = field(init=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != 4:
            raise ValueError(f"expected (4, length) samples, got shape {self.samples.shape}")
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}, expected one of {FORMATS}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.channel_count = 4

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.length / self.sample_rate


def _normalize_pcm(data):
    if data.dtype == np.int16:
        return data.astype(np.float64) / 2.0 ** 15
    if data.dtype == np.int32:
        # scipy loads 24-bit PCM into the top bytes of int32, so one scale fits both
        return data.astype(np.float64) / 2.0 ** 31
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise ValueError(f"unsupported WAV sample type {data.dtype}")


def read_wav_clip(path, fmt):
    """Read a 4-channel PCM/float WAV as a MultichannelClip.

    Rejects anything that is not 4 channels at 24 kHz; FOA files are remapped
    from ACN to internal channel order.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    rate, data = wavfile.read(path)
    if data.ndim != 2 or data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 channels, got shape {data.shape}")
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz input, got {rate} Hz "
                         "(resampling is out of scope)")
    samples = _normalize_pcm(data).T
    if fmt == FOA:
        samples = samples[list(_ACN_TO_INTERNAL)]
    return MultichannelClip(samples=samples, sample_rate=rate, format=fmt)


def write_wav_clip(path, clip):
    """Write a clip as 32-bit float WAV (FOA goes back to ACN order)."""
    samples = clip.samples
    if clip.format == FOA:
        samples = samples[list(_INTERNAL_TO_ACN)]
    wavfile.write(path, clip.sample_rate, samples.T.astype(np.float32))
