"""n-gram count features and a softmax-regression baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def grams(tokens: Sequence[str], n_max: int, n_min: int = 1) -> list[str]:
    """All contiguous n-grams of the given lengths, joined with ``_``."""
    out = []
    for n in range(n_min, n_max + 1):
        for i in range(len(tokens) - n + 1):
            out.append("_".join(tokens[i : i + n]))
    return out


@dataclass
class NgramFeaturizer:
    n_max: int = 3
    n_min: int = 1
    gram_to_index: dict[str, int] = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return len(self.gram_to_index)

    def transform(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        X = np.zeros((len(token_lists), self.dimension))
        for row, tokens in enumerate(token_lists):
            for g in grams(tokens, self.n_max, self.n_min):
                j = self.gram_to_index.get(g)
                if j is not None:
                    X[row, j] += 1.0
        return X

    def to_json(self) -> str:
        return json.dumps({"n_min": self.n_min, "n_max": self.n_max, "grams": self.gram_to_index}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "NgramFeaturizer":
        obj = json.loads(text)
        return cls(n_max=obj["n_max"], n_min=obj["n_min"], gram_to_index=dict(obj["grams"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NgramFeaturizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_featurizer(corpus: Sequence[Sequence[str]], n_max: int = 3) -> NgramFeaturizer:
    """Index every gram of length 1..n_max in first-occurrence order."""
    if n_max not in (1, 2, 3):
        raise ValueError("n_max must be 1, 2 or 3")
    index: dict[str, int] = {}
    for tokens in corpus:
        for g in grams(tokens, n_max):
            if g not in index:
                index[g] = len(index)
    return NgramFeaturizer(n_max=n_max, gram_to_index=index)


def featurize(tokens: Sequence[str], featurizer: NgramFeaturizer) -> np.ndarray:
    return featurizer.transform([tokens])[0]


@dataclass
class NgramConfig:
    num_classes: int
    n_max: int = 3

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_max not in (1, 2, 3):
            raise ValueError("n_max must be 1, 2 or 3")


class LinearSoftmax:
    """softmax(x @ W + b) over count vectors."""

    def __init__(self, n_features: int, num_classes: int, seed: int = 0):
        from .model import xavier_uniform

        rng = np.random.default_rng(seed)
        self.W = Tensor(xavier_uniform(rng, max(n_features, 1), num_classes), "linear.weight")
        self.b = Tensor(np.zeros(num_classes), "linear.bias")

    @property
    def output_weight(self) -> Tensor:
        return self.W

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def predict(self, inputs, train: bool = False, rng=None) -> Tensor:
        X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        return ad.dense_softmax(Tensor(X), None, self.W, self.b)

    def copy_state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), state):
            p.values[...] = v


def train_linear_baseline(train_data, valid_data, test_data, config, num_classes: int, seed: int = 0):
    """Fit a :class:`LinearSoftmax` with the shared Adam trainer.

    ``*_data`` are :class:`~bicnn.training.Dataset` objects holding count
    matrices. Returns ``(model, RunResult)``.
    """
    from .training import train

    model = LinearSoftmax(train_data.inputs[0].shape[1], num_classes, seed=seed)
    result = train(model, train_data, valid_data, test_data, config, num_classes, seed=seed)
    return model, result


LINEAR_FORMAT = "bicnn-ngram"


def save_linear_model(path: str | Path, model: LinearSoftmax, featurizer: NgramFeaturizer, labels=None, extra=None) -> None:
    """JSON file with the gram index and weights; floats round-trip exactly through repr."""
    obj = {
        "format": LINEAR_FORMAT,
        "version": 1,
        "n_max": featurizer.n_max,
        "n_min": featurizer.n_min,
        "grams": featurizer.gram_to_index,
        "weight": model.W.values.tolist(),
        "bias": model.b.values.tolist(),
        "labels": labels,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True, ensure_ascii=False), encoding="utf-8")


def load_linear_model(path: str | Path) -> tuple[LinearSoftmax, NgramFeaturizer, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != LINEAR_FORMAT or obj.get("version") != 1:
        raise ValueError(f"{path}: not an n-gram model file")
    featurizer = NgramFeaturizer(n_max=obj["n_max"], n_min=obj["n_min"], gram_to_index=dict(obj["grams"]))
    W = np.asarray(obj["weight"], dtype=np.float64)
    model = LinearSoftmax(W.shape[0], W.shape[1])
    model.W.values[...] = W
    model.b.values[...] = obj["bias"]
    return model, featurizer, obj
