"""Multi-embedding matrix construction for the toxic spans tagger."""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import DEFAULT_GPT2_MODEL, DEFAULT_ROBERTA_MODEL, DEFAULT_VECTOR_CACHE, GLOVE_DIM, LM_DIM
from .corpus import PAD_INDEX, UNK_INDEX, Vocabulary

logger = logging.getLogger(__name__)

GLOVE = "GloVe"
GPT2 = "GPT-2"
ROBERTA = "RoBERTa"

FUSION_SINGLE = "single"
FUSION_SUM_THEN_CONCAT = "sum-then-concat"
FUSION_CONCAT = "concat"

MATRIX_FORMAT = "toxic-spans-matrix"
MATRIX_VERSION = 1

LM_CHECKPOINTS = {
    GPT2: DEFAULT_GPT2_MODEL,
    ROBERTA: DEFAULT_ROBERTA_MODEL,
}


class GloveFormatError(ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"GloVe line {line_number}: {message}")
        self.line_number = line_number


class EmbeddingConfigError(ValueError):
    pass


class MatrixIntegrityError(ValueError):
    pass


class LanguageModelUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    """Which sources feed the matrix and how they are combined."""

    name: str
    sources: Tuple[str, ...]
    fusion: str

    @property
    def uses_glove(self) -> bool:
        return GLOVE in self.sources

    @property
    def lm_sources(self) -> Tuple[str, ...]:
        return tuple(source for source in self.sources if source != GLOVE)

    @classmethod
    def from_name(cls, name: str) -> "EmbeddingConfig":
        if name not in EMBEDDING_CONFIGS:
            raise EmbeddingConfigError(
                f"Unknown embedding config {name!r}, expected one of {list(EMBEDDING_CONFIGS)}")
        return EMBEDDING_CONFIGS[name]


# Column order of the ablation table
EMBEDDING_CONFIGS: Dict[str, EmbeddingConfig] = {
    "GloVe": EmbeddingConfig("GloVe", (GLOVE,), FUSION_SINGLE),
    "GPT-2": EmbeddingConfig("GPT-2", (GPT2,), FUSION_SINGLE),
    "RoBERTa": EmbeddingConfig("RoBERTa", (ROBERTA,), FUSION_SINGLE),
    "RG": EmbeddingConfig("RG", (GPT2, ROBERTA), FUSION_SUM_THEN_CONCAT),
    "GoR": EmbeddingConfig("GoR", (GLOVE, ROBERTA), FUSION_CONCAT),
    "GoG": EmbeddingConfig("GoG", (GLOVE, GPT2), FUSION_CONCAT),
    "Ensemble": EmbeddingConfig("Ensemble", (GLOVE, GPT2, ROBERTA), FUSION_SUM_THEN_CONCAT),
}


def expected_width(name: str, glove_dim: int = GLOVE_DIM, lm_dim: int = LM_DIM) -> int:
    """Matrix width for a named config: GloVe block plus at most one LM block."""
    config = EmbeddingConfig.from_name(name)
    return (glove_dim if config.uses_glove else 0) + (lm_dim if config.lm_sources else 0)


@dataclass
class EmbeddingMatrix:
    """Fused |V| x width table with a per-row GloVe OOV flag.

    The GloVe block, when present, occupies columns [0, glove_dim); the LM
    block follows it.
    """

    matrix: np.ndarray
    oov_mask: np.ndarray
    config_name: str
    glove_dim: int
    lm_dim: int
    vocab_hash: str

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    @property
    def dims(self) -> Tuple[int, int]:
        return self.glove_dim, self.lm_dim


def load_glove(
    path: Union[str, Path],
    vocab: Vocabulary,
    dim: Optional[int] = None
) -> Tuple[np.ndarray, Set[str]]:
    """Read GloVe vectors for the vocabulary words.

    Args:
        path: GloVe text file, one word followed by `dim` floats per line. Words
            containing spaces (present in the 840B release) are supported.
        vocab: Vocabulary whose words are looked up.
        dim: Vector size. Inferred from the first line when None.

    Returns:
        (vectors, oov) where `vectors` has one row per vocabulary index, zero
        for reserved entries and for words absent from the file.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"GloVe file not found at {path}")

    vectors: Optional[np.ndarray] = None
    found = set()
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if dim is None:
                dim = len(parts) - 1
            if len(parts) < dim + 1 or dim < 1:
                raise GloveFormatError(
                    line_number, f"expected a word and {dim} values, got {len(parts)} fields")
            if vectors is None:
                vectors = np.zeros((len(vocab), dim), dtype=np.float32)

            word = " ".join(parts[:-dim])
            index = vocab.stoi.get(word)
            if index is None or index <= UNK_INDEX or word in found:
                continue
            try:
                vectors[index] = np.asarray(parts[-dim:], dtype=np.float32)
            except ValueError as e:
                raise GloveFormatError(line_number, f"non-numeric value: {e}") from e
            found.add(word)

    if vectors is None:
        vectors = np.zeros((len(vocab), dim or GLOVE_DIM), dtype=np.float32)

    oov = {word for word in vocab.words if word not in found}
    logger.info("GloVe covers %d words, %d OOV out of %d", len(found), len(oov), vocab.num_words)
    if vocab.num_words and not found:
        logger.warning("No vocabulary word found in %s: GloVe block will be all zeros", path)
    return vectors, oov


@dataclass
class LanguageModelTable:
    """Subword tokenizer and static input-embedding table of a language model."""

    name: str
    tokenize: Callable[[str], List[int]]
    table: np.ndarray
    unk_id: int

    @property
    def dim(self) -> int:
        return self.table.shape[1]


# Loaded language models, keyed by checkpoint name
_language_models: Dict[str, LanguageModelTable] = {}


def load_language_model(
    name: str,
    cache_dir: Optional[str] = None,
    local_files_only: bool = False
) -> LanguageModelTable:
    """Load a pretrained checkpoint's tokenizer and input-embedding table.

    Args:
        name: Model hub name or local directory.
        cache_dir: Model hub cache directory.
        local_files_only: Never contact the hub.

    Returns:
        The loaded table. Repeated calls reuse the first load.
    """
    if name in _language_models:
        return _language_models[name]

    try:
        from transformers import AutoModel, AutoTokenizer
    except ImportError as e:
        raise LanguageModelUnavailableError("transformers is not installed") from e

    try:
        tokenizer = AutoTokenizer.from_pretrained(
            name, cache_dir=cache_dir, local_files_only=local_files_only)
        model = AutoModel.from_pretrained(
            name, cache_dir=cache_dir, local_files_only=local_files_only)
    except (OSError, ValueError) as e:
        raise LanguageModelUnavailableError(f"Checkpoint {name!r} unavailable: {e}") from e

    table = model.get_input_embeddings().weight.detach().cpu().numpy().astype(np.float32)
    unk_id = tokenizer.unk_token_id
    if unk_id is None:
        unk_id = tokenizer.eos_token_id

    def encode(word: str) -> List[int]:
        return tokenizer(word, add_special_tokens=False)["input_ids"]

    _language_models[name] = LanguageModelTable(name=name, tokenize=encode, table=table, unk_id=unk_id)
    logger.info("Loaded %s input embeddings: %d x %d", name, table.shape[0], table.shape[1])
    return _language_models[name]


def extract_lm_vectors(vocab: Vocabulary, lm: LanguageModelTable) -> np.ndarray:
    """Mean-pool each word's subword rows from the LM embedding table.

    Args:
        vocab: Vocabulary to embed; every word is tokenized in isolation.
        lm: Language model table.

    Returns:
        Array with one row per vocabulary index. Reserved rows are zero; a
        word yielding no subwords gets the LM's unknown-token row.
    """
    vectors = np.zeros((len(vocab), lm.dim), dtype=np.float32)
    for index, word in enumerate(tqdm(vocab.words, desc=f"Embedding with {lm.name}", leave=False),
                                 start=UNK_INDEX + 1):
        ids = lm.tokenize(word) or [lm.unk_id]
        vectors[index] = lm.table[ids].mean(axis=0)
    return vectors


def cached_lm_vectors(
    vocab: Vocabulary,
    lm_name: str,
    cache_dir: Optional[Union[str, Path]] = None,
    loader: Callable[[str], LanguageModelTable] = load_language_model
) -> np.ndarray:
    """Extract LM vectors once per (vocabulary, checkpoint) pair."""
    cache_dir = Path(os.path.expanduser(str(cache_dir or DEFAULT_VECTOR_CACHE)))
    cache_path = cache_dir / f"{lm_name.replace('/', '_')}-{vocab.hash[:16]}.npy"
    if cache_path.exists():
        vectors = np.load(cache_path)
        if vectors.shape[0] == len(vocab):
            logger.info("Using cached %s vectors from %s", lm_name, cache_path)
            return vectors
        logger.warning("Ignoring stale vector cache %s", cache_path)

    vectors = extract_lm_vectors(vocab, loader(lm_name))
    os.makedirs(cache_dir, exist_ok=True)
    np.save(cache_path, vectors)
    return vectors


def fuse(
    config: EmbeddingConfig,
    vocab: Vocabulary,
    glove: Optional[np.ndarray] = None,
    gpt2: Optional[np.ndarray] = None,
    roberta: Optional[np.ndarray] = None,
    glove_oov: Optional[Set[str]] = None
) -> EmbeddingMatrix:
    """Combine per-word source vectors into one matrix.

    Single configs use their source as-is. GPT-2 and RoBERTa are summed
    element-wise when both are requested, and the GloVe block is concatenated
    in front of the LM block.

    Args:
        config: Embedding configuration.
        vocab: Vocabulary the source rows are aligned with.
        glove: GloVe vectors, one row per vocabulary index.
        gpt2: GPT-2 vectors, one row per vocabulary index.
        roberta: RoBERTa vectors, one row per vocabulary index.
        glove_oov: Words missing from GloVe.

    Returns:
        The fused matrix with the padding and unknown rows zeroed. Unknown
        words have no vectors of their own, so every block of their row is zero.
    """
    sources = {GLOVE: glove, GPT2: gpt2, ROBERTA: roberta}
    missing = [name for name in config.sources if sources[name] is None]
    if missing:
        raise EmbeddingConfigError(
            f"Config {config.name} needs sources that were not loaded: {', '.join(missing)}")
    for name in config.sources:
        if sources[name].shape[0] != len(vocab):
            raise EmbeddingConfigError(
                f"{name} has {sources[name].shape[0]} rows, vocabulary has {len(vocab)}")

    blocks = []
    glove_dim = 0
    if config.uses_glove:
        glove_dim = glove.shape[1]
        blocks.append(glove.astype(np.float32))

    lm_dim = 0
    lm_blocks = [sources[name].astype(np.float32) for name in config.lm_sources]
    if lm_blocks:
        dims = {block.shape[1] for block in lm_blocks}
        if len(dims) != 1:
            raise EmbeddingConfigError(f"LM vectors must share one width, got {sorted(dims)}")
        lm_dim = dims.pop()
        blocks.append(np.sum(lm_blocks, axis=0, dtype=np.float32))

    matrix = np.concatenate(blocks, axis=1)
    if matrix.shape[1] != expected_width(config.name, glove_dim, lm_dim):
        raise EmbeddingConfigError(f"Config {config.name} produced width {matrix.shape[1]}")

    oov_mask = np.zeros(len(vocab), dtype=bool)
    if config.uses_glove:
        for word in glove_oov or ():
            if word in vocab:
                oov_mask[vocab.stoi[word]] = True
        oov_mask[UNK_INDEX] = True
        matrix[oov_mask, :glove_dim] = 0.0
    matrix[[PAD_INDEX, UNK_INDEX]] = 0.0

    logger.info("Fused %s matrix: %d x %d (%d OOV rows)",
                config.name, matrix.shape[0], matrix.shape[1], int(oov_mask.sum()))
    return EmbeddingMatrix(
        matrix=matrix,
        oov_mask=oov_mask,
        config_name=config.name,
        glove_dim=glove_dim,
        lm_dim=lm_dim,
        vocab_hash=vocab.hash,
    )


def save_matrix(path: Union[str, Path], embeddings: EmbeddingMatrix) -> None:
    """Write a JSON header line followed by little-endian float32 rows."""
    header = {
        "format": MATRIX_FORMAT,
        "version": MATRIX_VERSION,
        "vocab_hash": embeddings.vocab_hash,
        "config": embeddings.config_name,
        "rows": embeddings.rows,
        "width": embeddings.width,
        "glove_dim": embeddings.glove_dim,
        "lm_dim": embeddings.lm_dim,
        "oov_rows": np.flatnonzero(embeddings.oov_mask).tolist(),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(embeddings.matrix, dtype="<f4").tobytes())


def load_matrix(path: Union[str, Path], vocab: Optional[Vocabulary] = None) -> EmbeddingMatrix:
    """Read a matrix file, checking it against `vocab` when given."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Embedding matrix not found at {path}")

    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MatrixIntegrityError(f"{path} has no valid header: {e}") from e
        payload = f.read()

    if header.get("format") != MATRIX_FORMAT:
        raise MatrixIntegrityError(f"{path} is not an embedding matrix file")
    rows, width = header["rows"], header["width"]
    if len(payload) != rows * width * 4:
        raise MatrixIntegrityError(
            f"{path} holds {len(payload)} bytes, header promises {rows} x {width} floats")
    if vocab is not None and header["vocab_hash"] != vocab.hash:
        raise MatrixIntegrityError(
            f"{path} was built for vocabulary {header['vocab_hash'][:12]}, got {vocab.hash[:12]}")

    oov_mask = np.zeros(rows, dtype=bool)
    oov_mask[header["oov_rows"]] = True
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, width).astype(np.float32)
    return EmbeddingMatrix(
        matrix=matrix,
        oov_mask=oov_mask,
        config_name=header["config"],
        glove_dim=header["glove_dim"],
        lm_dim=header["lm_dim"],
        vocab_hash=header["vocab_hash"],
    )


def build_embedding_matrix(
    config_name: str,
    vocab: Vocabulary,
    glove_path: Optional[Union[str, Path]] = None,
    cache_dir: Optional[Union[str, Path]] = None,
    loader: Callable[[str], LanguageModelTable] = load_language_model
) -> EmbeddingMatrix:
    """Load every source a config needs and fuse them."""
    config = EmbeddingConfig.from_name(config_name)
    glove = glove_oov = None
    if config.uses_glove:
        if glove_path is None:
            raise EmbeddingConfigError(f"Config {config.name} needs a GloVe file")
        glove, glove_oov = load_glove(glove_path, vocab)

    lm_vectors = {
        source: cached_lm_vectors(vocab, LM_CHECKPOINTS[source], cache_dir, loader)
        for source in config.lm_sources
    }
    return fuse(config, vocab, glove=glove, gpt2=lm_vectors.get(GPT2),
                roberta=lm_vectors.get(ROBERTA), glove_oov=glove_oov)
