"""Phonation-mode classification from sung vowels.

Audio decoding and log-mel features, a small reverse-mode autodiff engine,
an attention CNN, cross-validated training and Grad-CAM heatmaps.
"""

from .audio import AudioClip, MelSpectrogram, mel_spectrogram, read_wav, write_wav
from .dataset import LabeledClip, PhonationMode, SegmentSet, synthesize_dataset
from .model import NetworkConfig, PhonationNet, build_network
from .training import TrainConfig, cross_validate, train_fold

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "LabeledClip", "MelSpectrogram", "NetworkConfig", "PhonationMode", "PhonationNet",
    "SegmentSet", "TrainConfig", "build_network", "cross_validate", "mel_spectrogram", "read_wav",
    "synthesize_dataset", "train_fold", "write_wav",
]
