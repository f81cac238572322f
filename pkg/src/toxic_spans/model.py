"""Bidirectional recurrent tagger with optional self-attention."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from . import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_DENSE_UNITS,
    DEFAULT_EPOCHS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_LEN,
    DEFAULT_SEED,
)
from .corpus import PAD_INDEX, TokenizedPost, Vocabulary, encode_posts
from .embeddings import EmbeddingMatrix
from .evaluation import SpanPrediction, decode_spans, span_f1

logger = logging.getLogger(__name__)

ENCODERS = ("BiGRU", "BiLSTM")
MODEL_VARIANTS = ("BiLSTM", "BiGRU", "BiLSTM+Attention", "BiGRU+Attention")
OUTPUT_ACTIVATIONS = ("sigmoid", "softmax")

# Probability clipping applied before the log, as in Keras
PROBABILITY_EPSILON = 1e-7


class ModelConstructionError(ValueError):
    def __init__(self, layer: str, message: str):
        super().__init__(f"Layer {layer}: {message}")
        self.layer = layer


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"Non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Tagger architecture and training hyperparameters."""

    encoder: str = "BiGRU"
    attention: bool = True
    hidden_size: int = DEFAULT_HIDDEN_SIZE
    dense_units: int = DEFAULT_DENSE_UNITS
    num_classes: int = 3
    max_len: int = DEFAULT_MAX_LEN
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    optimizer: str = "RMSprop"
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = DEFAULT_SEED
    output_activation: str = "sigmoid"
    normalize_scores: bool = False
    dropout: float = 0.0
    embedding_config: str = "Ensemble"

    @property
    def variant(self) -> str:
        return f"{self.encoder}+Attention" if self.attention else self.encoder

    @classmethod
    def from_variant(cls, variant: str, **overrides: Any) -> "ModelConfig":
        if variant not in MODEL_VARIANTS:
            raise ValueError(f"Unknown model variant {variant!r}, expected one of {MODEL_VARIANTS}")
        encoder, _, attention = variant.partition("+")
        return cls(encoder=encoder, attention=bool(attention), **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown model config keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class TaggerOutput:
    """Per-position class scores and argmax classes.

    Arrays are (max_len, 3) and (max_len,) for one post, with a leading batch
    axis for several.
    """

    class_scores: np.ndarray
    predicted_class: np.ndarray

    def __len__(self) -> int:
        return self.predicted_class.shape[0]

    def __getitem__(self, index: int) -> "TaggerOutput":
        return TaggerOutput(self.class_scores[index], self.predicted_class[index])


def self_attention(
    hidden: torch.Tensor,
    mask: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product self-attention over a sequence.

    Args:
        hidden: (..., L, d) sequence vectors.
        mask: (..., L) boolean, True for positions that may be attended to.

    Returns:
        (output, weights): output has the shape of `hidden`; weights are
        (..., L, L) with zero mass on masked keys. Rows with no attendable key
        produce a zero vector.
    """
    scores = hidden @ hidden.transpose(-1, -2) / math.sqrt(hidden.size(-1))
    key_mask = mask.unsqueeze(-2)
    scores = scores.masked_fill(~key_mask, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1) * key_mask.to(scores.dtype)
    return weights @ hidden, weights


class SelfAttention(nn.Module):
    """Parameter-free self-attention layer; output width equals input width."""

    def forward(self, hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        output, _ = self_attention(hidden, mask)
        return output


class ToxicSpanTagger(nn.Module):
    """Frozen embedding -> BiRNN -> BiRNN -> [self-attention] -> dense(tanh) -> class scores."""

    def __init__(self, config: ModelConfig, num_embeddings: int, embedding_dim: int):
        super().__init__()
        _validate_config(config, num_embeddings, embedding_dim)
        self.config = config
        self.vocab_hash: Optional[str] = None

        self.embedding = nn.Embedding(num_embeddings, embedding_dim, padding_idx=PAD_INDEX)
        self.embedding.weight.requires_grad_(False)

        rnn = nn.GRU if config.encoder == "BiGRU" else nn.LSTM
        self.encoder_1 = rnn(embedding_dim, config.hidden_size, batch_first=True, bidirectional=True)
        self.encoder_2 = rnn(2 * config.hidden_size, config.hidden_size, batch_first=True,
                             bidirectional=True)
        self.dropout = nn.Dropout(config.dropout)
        self.attention = SelfAttention() if config.attention else None
        self.dense = nn.Linear(2 * config.hidden_size, config.dense_units)
        self.output = nn.Linear(config.dense_units, config.num_classes)

    def layer_outputs(self, indices: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Run the stack and return every layer's output, in order."""
        outputs = {}
        mask = indices != PAD_INDEX
        x = self.embedding(indices)
        outputs["embedding"] = x
        x, _ = self.encoder_1(x)
        x = self.dropout(x)
        outputs["encoder_1"] = x
        x, _ = self.encoder_2(x)
        x = self.dropout(x)
        outputs["encoder_2"] = x
        if self.attention is not None:
            x = self.attention(x, mask)
            outputs["attention"] = x
        x = torch.tanh(self.dense(x))
        outputs["dense"] = x
        logits = self.output(x)
        if self.config.output_activation == "softmax":
            outputs["output"] = torch.softmax(logits, dim=-1)
        else:
            outputs["output"] = torch.sigmoid(logits)
        return outputs

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        return self.layer_outputs(indices)["output"]


def _validate_config(config: ModelConfig, num_embeddings: int, embedding_dim: int) -> None:
    if num_embeddings < 2 or embedding_dim < 1:
        raise ModelConstructionError(
            "embedding", f"needs at least 2 rows and 1 column, got {num_embeddings} x {embedding_dim}")
    if config.encoder not in ENCODERS:
        raise ModelConstructionError("encoder_1", f"unknown encoder {config.encoder!r}")
    if config.hidden_size < 1:
        raise ModelConstructionError("encoder_1", f"hidden_size must be positive, got {config.hidden_size}")
    if config.dense_units < 1:
        raise ModelConstructionError("dense", f"dense_units must be positive, got {config.dense_units}")
    if config.num_classes != 3:
        raise ModelConstructionError("output", f"expected 3 classes (pad, non-toxic, toxic), got {config.num_classes}")
    if config.output_activation not in OUTPUT_ACTIVATIONS:
        raise ModelConstructionError("output", f"unknown activation {config.output_activation!r}")
    if not 0.0 <= config.dropout < 1.0:
        raise ModelConstructionError("dropout", f"rate must be in [0, 1), got {config.dropout}")


def build_model(config: ModelConfig, embeddings: EmbeddingMatrix) -> ToxicSpanTagger:
    """Create a seeded tagger whose embedding layer holds the fused matrix."""
    if config.embedding_config != embeddings.config_name:
        logger.warning("Model config names embeddings %s, matrix is %s; using the matrix",
                       config.embedding_config, embeddings.config_name)
        config = ModelConfig.from_dict({**config.to_dict(), "embedding_config": embeddings.config_name})

    torch.manual_seed(config.seed)
    model = ToxicSpanTagger(config, embeddings.rows, embeddings.width)
    with torch.no_grad():
        model.embedding.weight.copy_(torch.from_numpy(embeddings.matrix))
    model.vocab_hash = embeddings.vocab_hash
    return model


@dataclass
class TaggingDataset:
    """Encoded posts plus the token spans needed to decode predictions."""

    indices: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray
    posts: Sequence[TokenizedPost]

    def __len__(self) -> int:
        return self.indices.shape[0]

    @classmethod
    def from_posts(
        cls,
        posts: Sequence[TokenizedPost],
        vocab: Vocabulary,
        max_len: int = DEFAULT_MAX_LEN
    ) -> "TaggingDataset":
        indices, labels, lengths = encode_posts(posts, vocab, max_len)
        return cls(indices=indices, labels=labels, lengths=lengths, posts=list(posts))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_f1: Optional[float]
    wall_time: float


def sequence_loss(scores: torch.Tensor, labels: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Sparse categorical cross-entropy averaged over every position.

    Sigmoid scores are divided by their sum first when `normalize_scores` is
    set; otherwise the loss is -log of the raw score at the true class.
    """
    probabilities = scores
    if config.output_activation == "sigmoid" and config.normalize_scores:
        probabilities = scores / scores.sum(dim=-1, keepdim=True)
    probabilities = probabilities.clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON)
    log_probabilities = torch.log(probabilities).reshape(-1, scores.size(-1))
    return F.nll_loss(log_probabilities, labels.reshape(-1))


def predict(
    model: ToxicSpanTagger,
    indices: Union[np.ndarray, torch.Tensor],
    batch_size: Optional[int] = None
) -> TaggerOutput:
    """Score one encoded post (L,) or a batch (N, L).

    Args:
        model: Trained tagger.
        indices: Vocabulary indices padded to the model's max_len.
        batch_size: Posts per forward pass. Defaults to the config batch size.

    Returns:
        Scores and argmax classes with the same leading shape as `indices`.
    """
    indices = torch.as_tensor(np.asarray(indices), dtype=torch.long)
    if indices.dim() not in (1, 2) or indices.size(-1) != model.config.max_len:
        raise ValueError(
            f"Expected sequences of length {model.config.max_len}, got shape {tuple(indices.shape)}")

    single = indices.dim() == 1
    batch = indices.unsqueeze(0) if single else indices
    batch_size = batch_size or model.config.batch_size

    model.eval()
    parts = []
    with torch.no_grad():
        for start in range(0, batch.size(0), batch_size):
            parts.append(model(batch[start:start + batch_size]))
    dtype = next(model.parameters()).dtype
    scores = torch.cat(parts) if parts else torch.empty(0, batch.size(1), model.config.num_classes,
                                                        dtype=dtype)
    scores = scores.numpy()
    classes = scores.argmax(axis=-1)
    if single:
        return TaggerOutput(scores[0], classes[0])
    return TaggerOutput(scores, classes)


def predict_spans(
    model: ToxicSpanTagger,
    dataset: TaggingDataset,
    bridge_gaps: bool = False
) -> List[SpanPrediction]:
    """Predict and decode character offsets for every post of a dataset."""
    output = predict(model, dataset.indices)
    return [
        decode_spans(tokenized.tokens, output[row], post_id=tokenized.id, bridge_gaps=bridge_gaps)
        for row, tokenized in enumerate(dataset.posts)
    ]


def score_dataset(model: ToxicSpanTagger, dataset: TaggingDataset) -> float:
    """Mean span F1 of the model's predictions against the dataset's gold offsets."""
    if not len(dataset):
        return 0.0
    predictions = predict_spans(model, dataset)
    scores = [span_f1(prediction, tokenized.post.gold_offsets)
              for prediction, tokenized in zip(predictions, dataset.posts)]
    return float(np.mean(scores))


def train(
    model: ToxicSpanTagger,
    train_data: TaggingDataset,
    dev_data: Optional[TaggingDataset] = None,
    config: Optional[ModelConfig] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None
) -> Tuple[ToxicSpanTagger, List[EpochRecord]]:
    """Fit the tagger with RMSprop on per-position cross-entropy.

    Args:
        model: Tagger from `build_model`.
        train_data: Encoded training posts.
        dev_data: Encoded development posts, scored with span F1 after every epoch.
        config: Training hyperparameters. Defaults to the model's config.
        checkpoint_dir: Where `last.pt` and `best_dev.pt` are written.
        log_path: Line-delimited JSON file receiving one record per epoch.

    Returns:
        The final-epoch model and the per-epoch records.
    """
    config = config or model.config
    if len(train_data) == 0:
        raise ValueError("Training set is empty")

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.RMSprop(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.learning_rate, alpha=0.9, eps=1e-7)

    indices = torch.as_tensor(train_data.indices, dtype=torch.long)
    labels = torch.as_tensor(train_data.labels, dtype=torch.long)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    history: List[EpochRecord] = []
    best_dev_f1 = -1.0
    for epoch in range(1, config.epochs + 1):
        started = time.time()
        model.train()
        order = torch.randperm(len(train_data), generator=generator)
        total_loss = 0.0
        batches = range(0, len(train_data), config.batch_size)
        for batch, start in enumerate(tqdm(batches, desc=f"Epoch {epoch}", leave=False)):
            rows = order[start:start + config.batch_size]
            loss = sequence_loss(model(indices[rows]), labels[rows], config)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch, batch, loss.item())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(rows)

        dev_f1 = score_dataset(model, dev_data) if dev_data is not None else None
        record = EpochRecord(epoch=epoch, train_loss=total_loss / len(train_data),
                             dev_f1=dev_f1, wall_time=time.time() - started)
        history.append(record)
        logger.info("Epoch %d: train_loss=%.4f dev_f1=%s (%.1fs)", epoch, record.train_loss,
                    "n/a" if dev_f1 is None else f"{dev_f1:.4f}", record.wall_time)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(asdict(record)) + "\n")

        if checkpoint_dir is not None and dev_f1 is not None and dev_f1 > best_dev_f1:
            best_dev_f1 = dev_f1
            save_checkpoint(Path(checkpoint_dir) / "best_dev.pt", model, epoch=epoch)

    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "last.pt", model, epoch=config.epochs)
    return model, history


def save_checkpoint(path: Union[str, Path], model: ToxicSpanTagger, epoch: Optional[int] = None) -> None:
    """Save config, vocabulary hash, embedding config name and all parameters."""
    torch.save({
        "config": model.config.to_dict(),
        "vocab_hash": model.vocab_hash,
        "embedding_config": model.config.embedding_config,
        "embedding_shape": list(model.embedding.weight.shape),
        "epoch": epoch,
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: Union[str, Path], vocab: Optional[Vocabulary] = None) -> ToxicSpanTagger:
    """Rebuild a tagger from a checkpoint, verifying the vocabulary when given."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found at {path}")

    checkpoint = torch.load(path, map_location="cpu")
    if vocab is not None and checkpoint["vocab_hash"] != vocab.hash:
        raise CheckpointIntegrityError(
            f"{path} was trained on vocabulary {str(checkpoint['vocab_hash'])[:12]}, "
            f"got {vocab.hash[:12]}")

    config = ModelConfig.from_dict(checkpoint["config"])
    rows, width = checkpoint["embedding_shape"]
    model = ToxicSpanTagger(config, rows, width)
    model.load_state_dict(checkpoint["state_dict"])
    model.vocab_hash = checkpoint["vocab_hash"]
    model.eval()
    return model
