"""Single- and two-channel convolutional report classifiers."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .text import PAD_INDEX, IndexedSequence, Vocabulary

FORMAT_NAME = "bicnn-model"
FORMAT_VERSION = 1
_MAGIC = b"BICNNMDL"


class InvalidConfig(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    kernel_sizes: tuple[int, ...] = (3, 4, 5)
    feature_maps: int = 120
    embedding_dim: int = 128
    num_channels: int = 2
    dropout_p: float = 0.5
    embed_init_range: float = 0.25
    conv_init_std: float = 0.1
    bias_init: float = 0.1

    def __post_init__(self) -> None:
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.validate()

    def validate(self) -> None:
        if not self.kernel_sizes or any(k < 1 for k in self.kernel_sizes):
            raise InvalidConfig(f"kernel sizes must be >= 1, got {self.kernel_sizes}")
        if self.feature_maps < 1 or self.embedding_dim < 1:
            raise InvalidConfig("feature_maps and embedding_dim must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfig("need at least 2 classes")
        if self.num_channels not in (1, 2):
            raise InvalidConfig("num_channels must be 1 or 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfig("dropout_p must lie in [0, 1)")

    @property
    def pooled_features(self) -> int:
        return self.num_channels * len(self.kernel_sizes) * self.feature_maps

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d


@dataclass
class BiCnnModel:
    """Shared embedding, per-channel filter banks and a softmax output layer.

    ``filters[(channel, K)]`` is a pair of tensors: weights [F, K, D] and a
    per-position bias [F, n_max - K + 1].
    """

    config: ModelConfig
    n_max: int
    embedding: Tensor
    filters: dict[tuple[int, int], tuple[Tensor, Tensor]]
    W_out: Tensor
    b_out: Tensor
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def output_weight(self) -> Tensor:
        return self.W_out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [("embedding", self.embedding)]
        for (ch, k), (w, b) in sorted(self.filters.items()):
            params.append((f"conv.c{ch}.k{k}.weight", w))
            params.append((f"conv.c{ch}.k{k}.bias", b))
        params.append(("output.weight", self.W_out))
        params.append(("output.bias", self.b_out))
        return params

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def pooled(self, forward_idx, reverse_idx) -> Tensor:
        """Max-pooled feature vector(s) [B, L] for index matrices [B, N]."""
        cfg = self.config
        inputs = [forward_idx, reverse_idx][: cfg.num_channels]
        feats = []
        for ch, idx in enumerate(inputs):
            x = ad.embed_lookup(self.embedding, idx, padding_idx=PAD_INDEX)
            for k in cfg.kernel_sizes:
                w, b = self.filters[(ch, k)]
                h = ad.relu(ad.conv_window(x, w, b))
                feats.append(ad.max_over_time(h))
        return ad.concat(feats, axis=-1)

    def predict(self, inputs, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Class probabilities [B, C] for ``inputs = (forward_idx, reverse_idx)``."""
        fwd, rev = (np.atleast_2d(np.asarray(a, dtype=np.int64)) for a in inputs)
        if fwd.shape[1] != self.n_max or rev.shape != fwd.shape:
            raise ad.ShapeMismatch(f"expected sequences of length {self.n_max}, got {fwd.shape}/{rev.shape}")
        hhat = self.pooled(fwd, rev)
        p = self.config.dropout_p
        if train and p > 0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng")
            mask = Tensor((rng.random(hhat.shape) >= p).astype(np.float64))
            return ad.dense_softmax(hhat, mask, self.W_out, self.b_out, scale=1.0 / (1.0 - p))
        return ad.dense_softmax(hhat, None, self.W_out, self.b_out)

    def count_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy_state(self) -> list[np.ndarray]:
        return [t.values.copy() for t in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        for t, v in zip(self.parameters(), state):
            t.values[...] = v


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(config: ModelConfig, vocab_size: int, seed: int, n_max: int) -> BiCnnModel:
    """Randomly initialise a model for a vocabulary of ``vocab_size`` words.

    The embedding table has ``vocab_size + 2`` rows (padding and unknown).
    """
    config.validate()
    if vocab_size < 0:
        raise InvalidConfig("vocab_size must be non-negative")
    if n_max < max(config.kernel_sizes):
        raise InvalidConfig(f"n_max={n_max} shorter than the largest kernel")
    rng = np.random.default_rng(seed)
    d, f = config.embedding_dim, config.feature_maps
    r = config.embed_init_range
    emb = rng.uniform(-r, r, size=(vocab_size + 2, d))
    emb[PAD_INDEX] = 0.0
    filters = {}
    for ch in range(config.num_channels):
        for k in config.kernel_sizes:
            w = rng.normal(0.0, config.conv_init_std, size=(f, k, d))
            b = np.full((f, n_max - k + 1), config.bias_init)
            filters[(ch, k)] = (Tensor(w, f"conv.c{ch}.k{k}.weight"), Tensor(b, f"conv.c{ch}.k{k}.bias"))
    L = config.pooled_features
    W_out = xavier_uniform(rng, L, config.num_classes)
    b_out = np.full(config.num_classes, config.bias_init)
    return BiCnnModel(
        config=config,
        n_max=n_max,
        embedding=Tensor(emb, "embedding"),
        filters=filters,
        W_out=Tensor(W_out, "output.weight"),
        b_out=Tensor(b_out, "output.bias"),
        seed=seed,
    )


def forward(
    model: BiCnnModel, seq: IndexedSequence, mode: str = "infer", rng: np.random.Generator | None = None
) -> tuple[Tensor, Graph]:
    """Run one sequence through the model, recording into a fresh graph."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    with Graph() as graph:
        probs = model.predict((seq.forward[None], seq.reverse[None]), train=mode == "train", rng=rng)
        out = ad.reshape(probs, (model.config.num_classes,))
    return out, graph


def count_params(model: BiCnnModel) -> int:
    return model.count_params()


# ------------------------------------------------------------ serialization


def save_model(
    path: str | Path,
    model: BiCnnModel,
    vocab: Vocabulary,
    labels: list[str] | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write ``model`` as magic + header length + JSON header + float64 LE blob.

    The header lists every tensor's name, shape and byte offset into the blob.
    """
    manifest = []
    blobs = []
    offset = 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "n_max": model.n_max,
        "seed": model.seed,
        "vocabulary": vocab.index_to_word,
        "labels": labels,
        "tensors": manifest,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_model(path: str | Path) -> tuple[BiCnnModel, Vocabulary, dict[str, Any]]:
    """Inverse of :func:`save_model`; returns (model, vocabulary, header)."""
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a model file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format {header.get('format')} v{header.get('version')}")
    cfg = ModelConfig(**header["config"])
    vocab = Vocabulary(index_to_word=list(header["vocabulary"]))
    model = init_model(cfg, vocab.size, header["seed"], header["n_max"])
    params = dict(model.named_parameters())
    for entry in header["tensors"]:
        t = params[entry["name"]]
        start = pos + entry["offset"]
        arr = np.frombuffer(data[start : start + entry["nbytes"]], dtype="<f8").reshape(entry["shape"])
        if arr.shape != t.shape:
            raise ValueError(f"{path}: tensor {entry['name']} has shape {arr.shape}, expected {t.shape}")
        t.values[...] = arr
    return model, vocab, header
