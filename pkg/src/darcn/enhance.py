"""Waveform-level enhancement with a trained model and checkpoint evaluation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Manifest
from .dsp import istft, magnitude, stft
from .errors import ContractError
from .metrics import EvalReport, evaluate_records
from .model import DarcnModel
from .training import level_gain, load_model


class ModelEnhancer:
    """Magnitude-to-magnitude map running the last stage of a model.

    Input level is normalized the same way as during training and undone
    on the way out.
    """

    def __init__(self, model: DarcnModel, stages: int | None = None):
        self.model = model.eval()
        self.stages = stages

    def __call__(self, mag: np.ndarray) -> np.ndarray:
        if mag.ndim != 2 or mag.shape[1] != self.model.cfg.n_freq:
            raise ContractError(f"model expects (T, {self.model.cfg.n_freq}) magnitudes, got {mag.shape}")
        gain = level_gain(mag)
        with T.no_grad():
            traces = self.model(mag * gain, self.stages)
        return np.asarray(traces[-1].estimate.data[0], dtype=np.float64) / gain


def enhance_waveform(samples: np.ndarray, enhancer) -> np.ndarray:
    """Noisy phase + enhanced magnitude through the inverse STFT, same length as the input."""
    cfg = enhancer.model.cfg.stft_config()
    spec = stft(samples, cfg)
    est = enhancer(magnitude(spec))
    return istft(est, cfg, phase_source=spec, length=len(samples))


def evaluate(ckpt, manifest, stages: int | None = None) -> EvalReport:
    model, _, _ = load_model(ckpt)
    records = manifest if isinstance(manifest, list) else Manifest.load(manifest)
    return evaluate_records(records, ModelEnhancer(model, stages), model.cfg.stft_config())
