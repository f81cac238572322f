"""Toxic spans dataset parsing, tokenization and vocabulary utilities."""

import ast
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import requests

from . import DEFAULT_DATA_URL, DEFAULT_MAX_LEN

logger = logging.getLogger(__name__)

FORMAT_WITH_SPANS = "csv-with-spans"
FORMAT_TEXT_ONLY = "csv-text-only"
DATASET_FORMATS = (FORMAT_WITH_SPANS, FORMAT_TEXT_ONLY)

# Reserved vocabulary entries
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

# Per-position classes
PAD_CLASS = 0
NON_TOXIC_CLASS = 1
TOXIC_CLASS = 2

SPLIT_FILES = {
    "train": "tsd_train.csv",
    "trial": "tsd_trial.csv",
    "test": "tsd_test.csv",
}

_CHUNK_RE = re.compile(r"\S+")
_NON_LETTER_RE = re.compile(r"[^a-z]")


class DatasetFormatError(ValueError):
    """A row of the dataset file could not be parsed.

    `row` counts data rows from 1, not including the header.
    """

    def __init__(self, row: Optional[int], message: str):
        location = f"Row {row}: " if row is not None else ""
        super().__init__(f"{location}{message}")
        self.row = row


class DatasetValidationError(ValueError):
    """A parsed post violates the offset invariants."""

    def __init__(self, post_id: str, message: str):
        super().__init__(f"Post {post_id}: {message}")
        self.post_id = post_id


@dataclass(frozen=True)
class Post:
    """A post with its gold toxic character offsets.

    `labeled` is False for posts read from a text-only file; their
    `gold_offsets` are empty because no annotation exists, not because the
    post is clean.
    """

    id: str
    text: str
    gold_offsets: FrozenSet[int] = frozenset()
    labeled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "gold_offsets", frozenset(self.gold_offsets))
        for offset in self.gold_offsets:
            if offset < 0 or offset >= len(self.text):
                raise DatasetValidationError(
                    self.id,
                    f"offset {offset} outside text of length {len(self.text)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "gold_offsets": sorted(self.gold_offsets),
            "labeled": self.labeled,
        }


@dataclass(frozen=True)
class TokenSpan:
    """A token of a post, located by character offsets into the original text.

    `clean` is None until the token has been preprocessed; an empty string
    marks a token with nothing left after preprocessing.
    """

    raw: str
    start: int
    end: int
    clean: Optional[str] = None
    toxic: bool = False

    @property
    def removable(self) -> bool:
        return self.clean == ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "raw": self.raw,
            "clean": self.clean,
            "start": self.start,
            "end": self.end,
            "toxic": self.toxic,
        }


@dataclass(frozen=True)
class TokenizedPost:
    """A post with its preprocessed, labeled and filtered tokens."""

    post: Post
    tokens: Tuple[TokenSpan, ...]

    @property
    def id(self) -> str:
        return self.post.id

    def to_dict(self) -> Dict[str, Any]:
        record = self.post.to_dict()
        record["tokens"] = [token.to_dict() for token in self.tokens]
        return record

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "TokenizedPost":
        post = Post(
            id=record["id"],
            text=record["text"],
            gold_offsets=frozenset(record["gold_offsets"]),
            labeled=record.get("labeled", True),
        )
        tokens = tuple(TokenSpan(**token) for token in record["tokens"])
        return cls(post=post, tokens=tokens)


def _parse_span_literal(literal: str, row: int) -> FrozenSet[int]:
    try:
        value = ast.literal_eval(literal)
    except (ValueError, SyntaxError) as e:
        raise DatasetFormatError(row, f"malformed span literal {literal!r}: {e}") from e

    if not isinstance(value, (list, tuple)):
        raise DatasetFormatError(row, f"span literal {literal!r} is not a list")
    for item in value:
        if isinstance(item, bool) or not isinstance(item, int):
            raise DatasetFormatError(row, f"span literal {literal!r} contains non-integer {item!r}")
    return frozenset(value)


def parse_dataset(path: Union[str, Path], format: Optional[str] = None) -> List[Post]:
    """Parse a toxic spans CSV file.

    Args:
        path: CSV file with a `text` column and, for labeled data, a `spans`
            column holding a bracketed integer list. An optional `id` column is
            used as the post id; otherwise the zero-based row number is.
        format: One of `csv-with-spans` or `csv-text-only`. Detected from the
            header when None.

    Returns:
        One Post per row, in file order.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset not found at {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise DatasetFormatError(None, f"{path} has no header") from e

    if format is None:
        format = FORMAT_WITH_SPANS if "spans" in frame.columns else FORMAT_TEXT_ONLY
    if format not in DATASET_FORMATS:
        raise ValueError(f"Unknown dataset format {format!r}, expected one of {DATASET_FORMATS}")

    required = ["text"] + (["spans"] if format == FORMAT_WITH_SPANS else [])
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise DatasetFormatError(None, f"{path} is missing columns: {', '.join(missing)}")

    has_ids = "id" in frame.columns
    posts = []
    for row, record in enumerate(frame.to_dict("records")):
        post_id = str(record["id"]) if has_ids else str(row)
        if format == FORMAT_WITH_SPANS:
            offsets = _parse_span_literal(record["spans"], row + 1)
            posts.append(Post(id=post_id, text=record["text"], gold_offsets=offsets))
        else:
            posts.append(Post(id=post_id, text=record["text"], labeled=False))

    logger.info("Parsed %d posts from %s (%s)", len(posts), path, format)
    return posts


def _split_punctuation(text: str, start: int, end: int) -> List[Tuple[int, int]]:
    """Split leading and trailing non-alphanumeric runs off a chunk."""
    lead = start
    while lead < end and not text[lead].isalnum():
        lead += 1
    # Chunk made of punctuation only stays whole
    if lead == end:
        return [(start, end)]

    trail = end
    while trail > lead and not text[trail - 1].isalnum():
        trail -= 1

    pieces = []
    if lead > start:
        pieces.append((start, lead))
    pieces.append((lead, trail))
    if trail < end:
        pieces.append((trail, end))
    return pieces


def tokenize(text: str) -> List[TokenSpan]:
    """Split text on whitespace, then split off leading/trailing punctuation.

    Args:
        text: Original post text.

    Returns:
        Tokens sorted by start offset; `text[t.start:t.end] == t.raw` for each.
    """
    tokens = []
    for match in _CHUNK_RE.finditer(text):
        for start, end in _split_punctuation(text, match.start(), match.end()):
            tokens.append(TokenSpan(raw=text[start:end], start=start, end=end))
    return tokens


def preprocess(token: TokenSpan) -> TokenSpan:
    """Lowercase the token and keep ASCII letters only.

    Punctuation, digits, non-ASCII characters and emoji are all dropped. The
    offsets and raw form are left untouched.
    """
    return replace(token, clean=_NON_LETTER_RE.sub("", token.raw.lower()))


def label_tokens(post: Post, tokens: Sequence[TokenSpan]) -> List[TokenSpan]:
    """Assign toxicity labels and drop tokens that preprocess to nothing.

    A token is toxic when at least one of its characters is a gold offset.
    Tokens that were not preprocessed yet are preprocessed first.
    """
    labeled = []
    for token in tokens:
        if token.clean is None:
            token = preprocess(token)
        if token.removable:
            continue
        toxic = not post.gold_offsets.isdisjoint(range(token.start, token.end))
        labeled.append(replace(token, toxic=toxic))
    return labeled


def prepare_post(post: Post) -> TokenizedPost:
    """Tokenize, preprocess, label and filter a single post."""
    tokens = [preprocess(token) for token in tokenize(post.text)]
    return TokenizedPost(post=post, tokens=tuple(label_tokens(post, tokens)))


def prepare_posts(posts: Sequence[Post], workers: int = 1) -> List[TokenizedPost]:
    """Run `prepare_post` over a corpus, optionally in a process pool.

    Args:
        posts: Posts to prepare.
        workers: Number of processes. 1 runs in the current process.

    Returns:
        Tokenized posts in input order.
    """
    if workers <= 1 or len(posts) < 2:
        return [prepare_post(post) for post in posts]

    chunksize = max(1, len(posts) // (workers * 4))
    with Pool(workers) as pool:
        return pool.map(prepare_post, posts, chunksize=chunksize)


class Vocabulary:
    """Word to index map with reserved padding and unknown entries."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: Dict[str, int] = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
        for word in words:
            if word in self.stoi:
                raise ValueError(f"Duplicate vocabulary entry {word!r}")
            self.stoi[word] = len(self.itos)
            self.itos.append(word)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi and self.stoi[word] > UNK_INDEX

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def words(self) -> List[str]:
        """Non-reserved entries in index order."""
        return self.itos[UNK_INDEX + 1:]

    @property
    def num_words(self) -> int:
        return len(self.itos) - 2

    def lookup(self, word: str) -> int:
        return self.stoi.get(word, UNK_INDEX)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"hash": self.hash, "words": self.words}, f, indent=0)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Vocabulary not found at {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        vocab = cls(data["words"])
        if data.get("hash") and data["hash"] != vocab.hash:
            raise ValueError(f"Vocabulary file {path} is corrupted: hash mismatch")
        return vocab


def build_vocabulary(posts: Iterable[TokenizedPost]) -> Vocabulary:
    """Index every clean token form of the training posts, sorted lexicographically."""
    words = set()
    for tokenized in posts:
        words.update(token.clean for token in tokenized.tokens if token.clean)
    vocab = Vocabulary(sorted(words))
    logger.info("Built vocabulary with %d words", vocab.num_words)
    return vocab


def encode(
    tokens: Sequence[TokenSpan],
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Map tokens to fixed-length index and class sequences.

    Args:
        tokens: Labeled tokens of one post.
        vocab: Training vocabulary; unseen words map to the unknown index.
        max_len: Output length. Longer posts are truncated.

    Returns:
        (indices, labels, length), where `length` counts the kept tokens.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")

    kept = tokens[:max_len]
    indices = np.full(max_len, PAD_INDEX, dtype=np.int64)
    labels = np.full(max_len, PAD_CLASS, dtype=np.int64)
    for position, token in enumerate(kept):
        indices[position] = vocab.lookup(token.clean)
        labels[position] = TOXIC_CLASS if token.toxic else NON_TOXIC_CLASS
    return indices, labels, len(kept)


def encode_posts(
    posts: Sequence[TokenizedPost],
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode a corpus into stacked (indices, labels, lengths) arrays."""
    indices = np.full((len(posts), max_len), PAD_INDEX, dtype=np.int64)
    labels = np.full((len(posts), max_len), PAD_CLASS, dtype=np.int64)
    lengths = np.zeros(len(posts), dtype=np.int64)
    truncated = 0
    for row, tokenized in enumerate(posts):
        indices[row], labels[row], lengths[row] = encode(tokenized.tokens, vocab, max_len)
        if len(tokenized.tokens) > max_len:
            truncated += 1

    if truncated:
        logger.warning("Truncated %d of %d posts to %d tokens", truncated, len(posts), max_len)
    return indices, labels, lengths


def corpus_statistics(
    posts: Sequence[TokenizedPost],
    vocab: Optional[Vocabulary] = None,
    max_len: int = DEFAULT_MAX_LEN
) -> Dict[str, Any]:
    """Summarize a prepared corpus."""
    lengths = np.array([len(p.tokens) for p in posts], dtype=np.int64)
    stats = {
        "posts": len(posts),
        "unlabeled_posts": sum(1 for p in posts if not p.post.labeled),
        "empty_gold_posts": sum(1 for p in posts if p.post.labeled and not p.post.gold_offsets),
        "tokens": int(lengths.sum()),
        "toxic_tokens": sum(1 for p in posts for t in p.tokens if t.toxic),
        "truncated_posts": int((lengths > max_len).sum()),
    }
    if len(lengths):
        stats["length_p50"] = float(np.percentile(lengths, 50))
        stats["length_p95"] = float(np.percentile(lengths, 95))
        stats["length_max"] = int(lengths.max())
    if vocab is not None:
        stats["vocab_size"] = vocab.num_words
        stats["unknown_tokens"] = sum(
            1 for p in posts for t in p.tokens if t.clean not in vocab)
    return stats


def save_tokenized(path: Union[str, Path], posts: Iterable[TokenizedPost]) -> int:
    """Write one JSON record per post. Returns the number of records."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for tokenized in posts:
            f.write(json.dumps(tokenized.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def load_tokenized(path: Union[str, Path]) -> List[TokenizedPost]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Tokenized corpus not found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [TokenizedPost.from_dict(json.loads(line)) for line in f if line.strip()]


def fetch_dataset(
    split: str,
    out_dir: Union[str, Path],
    base_url: Optional[str] = None
) -> Path:
    """Download one split of the toxic spans data.

    Args:
        split: `train`, `trial` or `test`.
        out_dir: Directory to write the CSV into.
        base_url: Directory URL holding the CSV files.

    Returns:
        Path of the downloaded file.
    """
    if split not in SPLIT_FILES:
        raise ValueError(f"Unknown split {split!r}, expected one of {sorted(SPLIT_FILES)}")

    base_url = (base_url or DEFAULT_DATA_URL).rstrip("/")
    url = f"{base_url}/{SPLIT_FILES[split]}"
    try:
        response = requests.get(url, timeout=60)
        response.raise_for_status()
    except requests.RequestException as e:
        raise RuntimeError(f"Failed to download {url}: {e}") from e

    os.makedirs(out_dir, exist_ok=True)
    target = Path(out_dir) / SPLIT_FILES[split]
    with open(target, "wb") as f:
        f.write(response.content)
    logger.info("Downloaded %s to %s", url, target)
    return target
