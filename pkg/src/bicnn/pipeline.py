"""Turn reports into model-ready datasets for each model family."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baseline import LinearSoftmax, NgramConfig, NgramFeaturizer, fit_featurizer
from .model import BiCnnModel, ModelConfig, init_model
from .text import Report, Vocabulary, build_vocabulary, encode_batch, report_tokens
from .training import Dataset, TrainConfig


def _labels(reports: Sequence[Report], num_classes: int) -> np.ndarray:
    labels = np.array([r.label for r in reports], dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


@dataclass
class SequenceEncoder:
    vocab: Vocabulary
    n_max: int
    num_classes: int

    def dataset(self, reports: Sequence[Report]) -> Dataset:
        fwd, rev = encode_batch([report_tokens(r) for r in reports], self.vocab, self.n_max)
        return Dataset((fwd, rev), _labels(reports, self.num_classes), [r.id for r in reports])


@dataclass
class NgramEncoder:
    featurizer: NgramFeaturizer
    num_classes: int

    def dataset(self, reports: Sequence[Report]) -> Dataset:
        X = self.featurizer.transform([report_tokens(r) for r in reports])
        return Dataset((X,), _labels(reports, self.num_classes), [r.id for r in reports])


def build_encoder(model_config, train_reports: Sequence[Report]):
    """Fit vocabulary (or n-gram index) and padding length on training reports only."""
    tokens = [report_tokens(r) for r in train_reports]
    if isinstance(model_config, NgramConfig):
        return NgramEncoder(fit_featurizer(tokens, model_config.n_max), model_config.num_classes)
    n_max = max([len(t) for t in tokens] + list(model_config.kernel_sizes))
    return SequenceEncoder(build_vocabulary(tokens), n_max, model_config.num_classes)


def build_model(model_config, encoder, seed: int, train_config: TrainConfig | None = None):
    if isinstance(model_config, NgramConfig):
        return LinearSoftmax(encoder.featurizer.dimension, model_config.num_classes, seed=seed)
    cfg = model_config
    if train_config is not None and train_config.dropout_p != cfg.dropout_p:
        cfg = dataclasses.replace(cfg, dropout_p=train_config.dropout_p)
    return init_model(cfg, encoder.vocab.size, seed, encoder.n_max)


def encoder_for_model(model: BiCnnModel, vocab: Vocabulary) -> SequenceEncoder:
    return SequenceEncoder(vocab, model.n_max, model.config.num_classes)


def is_sequence_config(cfg) -> bool:
    return isinstance(cfg, ModelConfig)
