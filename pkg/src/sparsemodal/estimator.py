"""Scikit-learn style front end for the multimodal classifiers.

``MultimodalEmotionClassifier`` wraps config, parameter init and the training
loop behind fit/predict/predict_proba/score, so the model slots into sklearn
tooling (get_params/set_params, clone, grid search over e.g. ``top_p``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from sparsemodal.config import ModelConfig
from sparsemodal.metrics import (
    confusion_counts,
    mean_over_classes,
    weighted_accuracy,
)
from sparsemodal.model import (
    DataSpec,
    Network,
    evaluate,
    predict_scores,
    run_training,
)
from sparsemodal.sparse import FlopsLedger, flops_report
from sparsemodal.signal import ModalitySample, pos_weights_from_labels

__all__ = ["MultimodalEmotionClassifier", "validate_samples"]


def validate_samples(X, n_classes: int | None = None) -> list[ModalitySample]:
    """Check a sample list is usable: consistent extents and label width."""
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a nonempty list of ModalitySample")
    first = X[0]
    if not isinstance(first, ModalitySample):
        raise TypeError(f"expected ModalitySample, got {type(first).__name__}")
    frame_shape = first.frames.shape[1:]
    chunk_shape = first.audio_chunks.shape[1:]
    width = len(first.labels) if n_classes is None else n_classes
    for i, s in enumerate(X):
        if not isinstance(s, ModalitySample):
            raise TypeError(f"X[{i}] is {type(s).__name__}")
        if s.frames.shape[1:] != frame_shape:
            raise ValueError(f"X[{i}] frame extents {s.frames.shape[1:]} "
                             f"differ from {frame_shape}")
        if s.audio_chunks.shape[1:] != chunk_shape:
            raise ValueError(f"X[{i}] chunk extents {s.audio_chunks.shape[1:]} "
                             f"differ from {chunk_shape}")
        if len(s.labels) != width:
            raise ValueError(f"X[{i}] has {len(s.labels)} labels, "
                             f"expected {width}")
        if len(s.frames) == 0 or len(s.audio_chunks) == 0 or \
                len(s.tokens) == 0:
            raise ValueError(f"X[{i}] has an empty modality")
    return list(X)


class MultimodalEmotionClassifier(BaseEstimator, ClassifierMixin):
    """Multi-label emotion classifier over (text, audio, vision) samples.

    ``mode="FE2E"`` runs every convolution densely; ``mode="MESM"`` inserts
    text-conditioned spatial attention with top-p selection in front of each
    block and convolves only the kept positions.
    """

    def __init__(self, mode: str = "FE2E", top_p: float = 0.5,
                 mask_mode: str = "faithful", modalities: str = "TAV",
                 d_model: int = 64, heads: int = 4, layers: int = 4,
                 n_blocks: int = 3, attn_width: int = 16,
                 stem_channels: int = 8, vocab_size: int = 32,
                 max_text_len: int = 50, max_seq_len: int = 32,
                 learning_rate: float = 5e-5, batch_size: int = 8,
                 epochs: int = 10, seed: int = 0,
                 pos_weight_cap: float = 100.0):
        self.mode = mode
        self.top_p = top_p
        self.mask_mode = mask_mode
        self.modalities = modalities
        self.d_model = d_model
        self.heads = heads
        self.layers = layers
        self.n_blocks = n_blocks
        self.attn_width = attn_width
        self.stem_channels = stem_channels
        self.vocab_size = vocab_size
        self.max_text_len = max_text_len
        self.max_seq_len = max_seq_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.pos_weight_cap = pos_weight_cap

    def _config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            mode=self.mode, top_p=self.top_p, mask_mode=self.mask_mode,
            modalities=self.modalities, classes=n_classes,
            d_model=self.d_model, heads=self.heads, layers=self.layers,
            n_blocks=self.n_blocks, attn_width=self.attn_width,
            stem_channels=self.stem_channels, vocab_size=self.vocab_size,
            max_text_len=self.max_text_len, max_seq_len=self.max_seq_len,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed,
            pos_weight_cap=self.pos_weight_cap)

    @staticmethod
    def _targets(X: list[ModalitySample], y) -> np.ndarray:
        if y is None:
            return np.stack([np.asarray(s.labels, dtype=np.float64)
                             for s in X])
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[0] != len(X):
            raise ValueError(
                f"y must be (n_samples, n_classes), got {y.shape}")
        return y

    def fit(self, X, y=None, X_valid=None, y_valid=None,
            stop_at_wacc: float | None = None):
        """Train on ModalitySample lists; multi-hot y defaults to X labels."""
        X = validate_samples(X)
        y = self._targets(X, y)
        n_classes = y.shape[1]
        fit_samples = [ModalitySample(s.tokens, s.audio_chunks, s.frames,
                                      y[i]) for i, s in enumerate(X)]
        valid_samples = []
        if X_valid is not None:
            X_valid = validate_samples(X_valid, n_classes)
            yv = self._targets(X_valid, y_valid)
            valid_samples = [ModalitySample(s.tokens, s.audio_chunks,
                                            s.frames, yv[i])
                             for i, s in enumerate(X_valid)]
        self.classes_ = np.arange(n_classes)
        self.pos_weight_ = pos_weights_from_labels(y, cap=self.pos_weight_cap)
        self.data_spec_ = DataSpec.from_samples(fit_samples)
        self.network_ = Network(self._config(n_classes), self.data_spec_)
        self.history_, self.optimizer_ = run_training(
            self.network_, fit_samples, valid_samples, self.pos_weight_,
            stop_at_wacc=stop_at_wacc)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """Per-class probabilities (n_samples, n_classes)."""
        self._check_fitted()
        X = validate_samples(X, len(self.classes_))
        return predict_scores(self.network_, X)

    def predict(self, X) -> np.ndarray:
        """Multi-hot predictions at the 0.5 probability threshold."""
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def score(self, X, y=None) -> float:
        """Mean weighted accuracy over classes."""
        self._check_fitted()
        X = validate_samples(X, len(self.classes_))
        y = self._targets(X, y)
        counts = confusion_counts(self.predict(X), y)
        return mean_over_classes([weighted_accuracy(c) for c in counts])

    def evaluate(self, X, y=None) -> dict:
        """Per-class WAcc/F1 plus a MAC ledger report for the forward passes."""
        self._check_fitted()
        X = validate_samples(X, len(self.classes_))
        y = self._targets(X, y)
        samples = [ModalitySample(s.tokens, s.audio_chunks, s.frames, y[i])
                   for i, s in enumerate(X)]
        ledger = FlopsLedger()
        stats = evaluate(self.network_, samples, ledger=ledger,
                         pos_weight=self.pos_weight_)
        stats["flops"] = flops_report(ledger)
        stats["block_fraction"] = ledger.subset(
            lambda name: "/block" in name).fraction()
        return stats
