"""seldkit: desk-scale sound event localization and detection.

Multichannel audio features (log-mel, FOA intensity, GCC-PHAT), a
CRNN-biGRU-attention network on a small numpy autodiff engine, the two
multitask loss formulations, joint localization/detection metrics, a
synthetic spatial-audio generator, and a training/experiment CLI.
"""

__version__ = "0.1.0"
