"""Command-line pipeline: fetch, prepare, embed, train, predict, evaluate, ablate."""

import argparse
import datetime
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from dotenv import load_dotenv

from . import DEFAULT_DATA_URL, DEFAULT_MAX_LEN, DEFAULT_SEED, DEFAULT_VECTOR_CACHE, __version__
from .corpus import (
    DATASET_FORMATS,
    SPLIT_FILES,
    TokenizedPost,
    Vocabulary,
    build_vocabulary,
    corpus_statistics,
    fetch_dataset,
    load_tokenized,
    parse_dataset,
    prepare_posts,
    save_tokenized,
)
from .embeddings import (
    EMBEDDING_CONFIGS,
    EmbeddingConfig,
    EmbeddingMatrix,
    build_embedding_matrix,
    cached_lm_vectors,
    fuse,
    load_glove,
    load_language_model,
    load_matrix,
    save_matrix,
    GPT2,
    LM_CHECKPOINTS,
    ROBERTA,
)
from .evaluation import (
    FAILED,
    ablation_report,
    evaluate,
    read_predictions,
    write_predictions,
)
from .model import (
    MODEL_VARIANTS,
    ModelConfig,
    TaggingDataset,
    build_model,
    load_checkpoint,
    predict_spans,
    score_dataset,
    train,
)

load_dotenv()  # Load environment variables from .env file

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def json_serializer(obj: Any) -> Any:
    """JSON fallback for timestamps, paths, numpy values and sets."""
    if isinstance(obj, (datetime.datetime, datetime.date)):
        return obj.isoformat()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"Type {type(obj)} not serializable")


def get_hub_settings() -> Dict[str, Any]:
    """Read model-hub settings from the environment."""
    return {
        "cache_dir": os.getenv("TOXIC_SPANS_HUB_CACHE"),
        "local_files_only": os.getenv("TOXIC_SPANS_OFFLINE", "false").lower() == "true",
        "vector_cache": os.getenv("TOXIC_SPANS_VECTOR_CACHE", DEFAULT_VECTOR_CACHE),
    }


def require_path(value: Optional[str], env_name: str, flag: str) -> str:
    """Return the flag value, falling back to an environment variable.

    Raises:
        ValueError: If neither the flag nor the variable is set.
    """
    value = value or os.getenv(env_name)
    if not value:
        raise ValueError(f"Missing required input: pass {flag} or set {env_name}")
    return value


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must hold a mapping")
    return data


# Flags that override ModelConfig fields, by attribute name
MODEL_FLAGS = (
    "encoder", "attention", "hidden_size", "dense_units", "max_len", "batch_size", "epochs",
    "learning_rate", "seed", "output_activation", "normalize_scores", "dropout", "embedding_config",
)


def resolve_model_config(args: argparse.Namespace, **fixed: Any) -> ModelConfig:
    """Merge built-in defaults, the config file and explicit flags, in that order."""
    values = load_config_file(getattr(args, "config", None))
    for name in MODEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    values.update(fixed)
    return ModelConfig.from_dict(values)


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    inputs: Dict[str, Any]
    outputs: Dict[str, Any]
    seed: Optional[int] = None
    version: str = __version__
    started_at: str = field(default_factory=lambda: datetime.datetime.now().isoformat())
    finished_at: Optional[str] = None


def write_manifest(out_dir: str, manifest: RunManifest) -> Path:
    manifest.finished_at = datetime.datetime.now().isoformat()
    os.makedirs(out_dir, exist_ok=True)
    path = Path(out_dir) / f"{manifest.command}_{MANIFEST_NAME}"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(manifest), f, indent=2, sort_keys=True, default=json_serializer)
    return path


def load_posts(path: str, workers: int = 1, format: Optional[str] = None) -> List[TokenizedPost]:
    """Load a prepared corpus (.jsonl) or parse and prepare a CSV file."""
    if path.endswith(".jsonl"):
        return load_tokenized(path)
    return prepare_posts(parse_dataset(path, format=format), workers=workers)


def cmd_fetch(args: argparse.Namespace) -> int:
    base_url = args.base_url or os.getenv("TOXIC_SPANS_DATA_URL", DEFAULT_DATA_URL)
    for split in args.split or list(SPLIT_FILES):
        target = fetch_dataset(split, args.out_dir, base_url)
        print(f"Downloaded {split} split to {target}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    manifest = RunManifest(command="prepare", config={"split": args.split, "max_len": args.max_len,
                                                      "format": args.format},
                           inputs={"data": args.data, "vocab": args.vocab}, outputs={})
    posts = load_posts(args.data, workers=args.workers, format=args.format)
    if not posts:
        logger.warning("No posts found in %s", args.data)

    os.makedirs(args.out_dir, exist_ok=True)
    corpus_path = Path(args.out_dir) / f"{args.split}.jsonl"
    save_tokenized(corpus_path, posts)
    manifest.outputs["corpus"] = corpus_path

    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    elif args.split == "train":
        vocab = build_vocabulary(posts)
        vocab_path = Path(args.out_dir) / "vocab.json"
        vocab.save(vocab_path)
        manifest.outputs["vocab"] = vocab_path
    else:
        vocab = None

    stats = corpus_statistics(posts, vocab, args.max_len)
    stats_path = Path(args.out_dir) / f"{args.split}_stats.json"
    with open(stats_path, "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, default=json_serializer)
    manifest.outputs["stats"] = stats_path
    write_manifest(args.out_dir, manifest)

    print(f"Split: {args.split}")
    for key, value in stats.items():
        print(f"{key}: {value}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    vocab = Vocabulary.load(args.vocab)
    settings = get_hub_settings()
    loader = partial(load_language_model, cache_dir=settings["cache_dir"],
                     local_files_only=settings["local_files_only"])
    glove_path = args.glove or os.getenv("TOXIC_SPANS_GLOVE")
    embeddings = build_embedding_matrix(args.config, vocab, glove_path=glove_path,
                                        cache_dir=settings["vector_cache"], loader=loader)
    save_matrix(args.out, embeddings)

    oov = int(embeddings.oov_mask[2:].sum())
    print(f"Config: {embeddings.config_name}")
    print(f"Matrix: {embeddings.rows} x {embeddings.width}")
    if EmbeddingConfig.from_name(args.config).uses_glove:
        print(f"GloVe OOV: {oov} of {vocab.num_words}")
        if vocab.num_words and oov == vocab.num_words:
            logger.warning("Every vocabulary word is missing from GloVe (100% OOV)")

    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, RunManifest(
        command="embed", config={"embedding_config": args.config},
        inputs={"vocab": args.vocab, "glove": glove_path}, outputs={"matrix": args.out}))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    vocab = Vocabulary.load(args.vocab)
    embeddings = load_matrix(args.embeddings, vocab)
    config = resolve_model_config(args, embedding_config=embeddings.config_name)

    train_posts = load_posts(args.train, workers=args.workers)
    dev_posts = load_posts(args.dev, workers=args.workers) if args.dev else None
    train_data = TaggingDataset.from_posts(train_posts, vocab, config.max_len)
    dev_data = TaggingDataset.from_posts(dev_posts, vocab, config.max_len) if dev_posts else None

    os.makedirs(args.out_dir, exist_ok=True)
    checkpoint_dir = Path(args.out_dir) / "checkpoints"
    log_path = Path(args.out_dir) / "training_log.jsonl"
    if log_path.exists():
        log_path.unlink()

    model = build_model(config, embeddings)
    _, history = train(model, train_data, dev_data, config,
                       checkpoint_dir=checkpoint_dir, log_path=log_path)

    write_manifest(args.out_dir, RunManifest(
        command="train", config=config.to_dict(), seed=config.seed,
        inputs={"train": args.train, "dev": args.dev, "vocab": args.vocab,
                "embeddings": args.embeddings},
        outputs={"checkpoints": checkpoint_dir, "training_log": log_path}))

    final = history[-1]
    print(f"Trained {config.variant} on {len(train_data)} posts for {config.epochs} epochs")
    print(f"Final train loss: {final.train_loss:.4f}")
    if final.dev_f1 is not None:
        print(f"Final dev F1: {final.dev_f1:.3f}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    vocab = Vocabulary.load(args.vocab)
    model = load_checkpoint(args.checkpoint, vocab)
    posts = load_posts(args.data, workers=args.workers)
    dataset = TaggingDataset.from_posts(posts, vocab, model.config.max_len)
    predictions = predict_spans(model, dataset, bridge_gaps=args.bridge_gaps)

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_predictions(args.out, predictions)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), RunManifest(
        command="predict", config={**model.config.to_dict(), "bridge_gaps": args.bridge_gaps},
        seed=model.config.seed,
        inputs={"checkpoint": args.checkpoint, "vocab": args.vocab, "data": args.data},
        outputs={"predictions": args.out}))
    print(f"Wrote predictions for {len(predictions)} posts to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    posts = [p.post for p in load_posts(args.gold)]
    if any(not post.labeled for post in posts):
        raise ValueError(f"{args.gold} has no gold spans to score against")
    predictions = read_predictions(args.predictions, [post.id for post in posts])
    report = evaluate(predictions, posts)

    if args.out:
        report.save(args.out)
        write_manifest(os.path.dirname(os.path.abspath(args.out)), RunManifest(
            command="evaluate", config={},
            inputs={"gold": args.gold, "predictions": args.predictions},
            outputs={"report": args.out}))

    print(f"Posts: {report.num_posts} ({report.num_empty_gold} with empty gold)")
    print(f"Precision: {report.mean_precision:.3f}  Recall: {report.mean_recall:.3f}  "
          f"F1: {report.mean_f1:.3f}")
    return 0


def parse_cells(only: Optional[Sequence[str]]) -> List[Tuple[str, str]]:
    """Grid cells to run, in table order; `only` entries look like `BiGRU+Attention:Ensemble`."""
    grid = [(variant, name) for variant in MODEL_VARIANTS for name in EMBEDDING_CONFIGS]
    if not only:
        return grid
    wanted = set()
    for entry in only:
        variant, _, name = entry.partition(":")
        if (variant, name) not in grid:
            raise ValueError(f"Unknown grid cell {entry!r}; use VARIANT:CONFIG, e.g. BiGRU+Attention:Ensemble")
        wanted.add((variant, name))
    return [cell for cell in grid if cell in wanted]


def run_cell(payload: Dict[str, Any]) -> Dict[str, Any]:
    """Train and score one grid cell. Runs in a worker process when parallel."""
    key = (payload["variant"], payload["embedding_config"])
    try:
        config = ModelConfig.from_variant(payload["variant"], **payload["overrides"])
        model = build_model(config, payload["embeddings"])
        cell_dir = Path(payload["cell_dir"])
        os.makedirs(cell_dir, exist_ok=True)
        log_path = cell_dir / "training_log.jsonl"
        if log_path.exists():
            log_path.unlink()
        model, _ = train(model, payload["train"], payload["dev"], config,
                         checkpoint_dir=cell_dir / "checkpoints", log_path=log_path)
        result = {"key": key, "dev": score_dataset(model, payload["dev"]), "test": None, "error": None}
        if payload["test"] is not None:
            result["test"] = score_dataset(model, payload["test"])
        return result
    except Exception as e:
        logger.exception("Grid cell %s:%s failed", *key)
        return {"key": key, "dev": None, "test": None, "error": str(e)}


def cmd_ablate(args: argparse.Namespace) -> int:
    cells = parse_cells(args.only)
    base_config = resolve_model_config(args)
    names = {name for _, name in cells}
    needs_glove = any(EmbeddingConfig.from_name(name).uses_glove for name in names)
    glove_path = require_path(args.glove, "TOXIC_SPANS_GLOVE", "--glove") if needs_glove else None

    train_posts = load_posts(args.train, workers=args.workers)
    dev_posts = load_posts(args.dev, workers=args.workers)
    test_posts = load_posts(args.test, workers=args.workers) if args.test else None
    vocab = build_vocabulary(train_posts)
    os.makedirs(args.out_dir, exist_ok=True)
    vocab.save(Path(args.out_dir) / "vocab.json")

    max_len = base_config.max_len
    train_data = TaggingDataset.from_posts(train_posts, vocab, max_len)
    dev_data = TaggingDataset.from_posts(dev_posts, vocab, max_len)
    test_data = TaggingDataset.from_posts(test_posts, vocab, max_len) if test_posts else None

    settings = get_hub_settings()
    loader = partial(load_language_model, cache_dir=settings["cache_dir"],
                     local_files_only=settings["local_files_only"])
    glove = glove_oov = None
    if needs_glove:
        glove, glove_oov = load_glove(glove_path, vocab)
    lm_vectors = {}
    for source in (GPT2, ROBERTA):
        if any(source in EmbeddingConfig.from_name(name).sources for name in names):
            lm_vectors[source] = cached_lm_vectors(vocab, LM_CHECKPOINTS[source],
                                                   settings["vector_cache"], loader)

    matrices: Dict[str, EmbeddingMatrix] = {}
    for name in EMBEDDING_CONFIGS:
        if name in names:
            matrices[name] = fuse(EmbeddingConfig.from_name(name), vocab, glove=glove,
                                  gpt2=lm_vectors.get(GPT2), roberta=lm_vectors.get(ROBERTA),
                                  glove_oov=glove_oov)

    grid = [(variant, name) for variant in MODEL_VARIANTS for name in EMBEDDING_CONFIGS]
    overrides = {k: v for k, v in base_config.to_dict().items() if k not in ("encoder", "attention")}
    payloads = []
    for variant, name in cells:
        cell_index = grid.index((variant, name))
        payloads.append({
            "variant": variant,
            "embedding_config": name,
            "overrides": {**overrides, "seed": base_config.seed + cell_index, "embedding_config": name},
            "embeddings": matrices[name],
            "train": train_data,
            "dev": dev_data,
            "test": test_data,
            "cell_dir": str(Path(args.out_dir) / "cells" / f"{variant}__{name}"),
        })

    if args.workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as executor:
            results = list(executor.map(run_cell, payloads))
    else:
        results = [run_cell(payload) for payload in payloads]

    dev_scores, test_scores, failures = {}, {}, {}
    for result in results:
        if result["error"] is not None:
            dev_scores[result["key"]] = FAILED
            test_scores[result["key"]] = FAILED
            failures[":".join(result["key"])] = result["error"]
            continue
        dev_scores[result["key"]] = result["dev"]
        if result["test"] is not None:
            test_scores[result["key"]] = result["test"]

    tables = [ablation_report(dev_scores, MODEL_VARIANTS, list(EMBEDDING_CONFIGS),
                              title="Results on dev set")]
    if test_data is not None:
        tables.append(ablation_report(test_scores, MODEL_VARIANTS, list(EMBEDDING_CONFIGS),
                                      title="Results on test set"))
    text = "\n\n".join(tables)
    with open(Path(args.out_dir) / "report.txt", "w", encoding="utf-8") as f:
        f.write(text + "\n")
    with open(Path(args.out_dir) / "report.json", "w", encoding="utf-8") as f:
        json.dump({
            "dev": {":".join(k): v for k, v in dev_scores.items()},
            "test": {":".join(k): v for k, v in test_scores.items()},
            "failures": failures,
        }, f, indent=2, sort_keys=True)

    write_manifest(args.out_dir, RunManifest(
        command="ablate", config={**base_config.to_dict(), "cells": [":".join(c) for c in cells]},
        seed=base_config.seed,
        inputs={"train": args.train, "dev": args.dev, "test": args.test, "glove": glove_path},
        outputs={"report": Path(args.out_dir) / "report.txt"}))

    print(text)
    if failures:
        print(f"\n{len(failures)} of {len(cells)} cells failed", file=sys.stderr)
        return 1
    return 0


def add_model_flags(parser: argparse.ArgumentParser) -> None:
    """Hyperparameter flags; unset flags fall back to the config file, then the defaults."""
    parser.add_argument("--config", type=str, help="YAML file with model config keys")
    parser.add_argument("--encoder", choices=["BiGRU", "BiLSTM"])
    parser.add_argument("--attention", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--hidden-size", type=int, help="Recurrent units per direction (default: 64)")
    parser.add_argument("--dense-units", type=int, help="Dense layer width (default: 50)")
    parser.add_argument("--max-len", type=int, help=f"Padded sequence length (default: {DEFAULT_MAX_LEN})")
    parser.add_argument("--batch-size", type=int, help="Batch size (default: 32)")
    parser.add_argument("--epochs", type=int, help="Training epochs (default: 10)")
    parser.add_argument("--learning-rate", type=float, help="RMSprop learning rate (default: 1e-3)")
    parser.add_argument("--seed", type=int, help=f"Random seed (default: {DEFAULT_SEED})")
    parser.add_argument("--output-activation", choices=["sigmoid", "softmax"])
    parser.add_argument("--normalize-scores", action=argparse.BooleanOptionalAction, default=None,
                        help="Divide sigmoid scores by their sum before the cross-entropy (default: off)")
    parser.add_argument("--dropout", type=float, help="Dropout after each recurrent layer (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toxic-spans", description="Toxic spans detection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    fetch = subparsers.add_parser("fetch", help="Download the toxic spans CSV files")
    fetch.add_argument("--split", action="append", choices=sorted(SPLIT_FILES),
                       help="Split to download (repeatable, default: all)")
    fetch.add_argument("--out-dir", type=str, default="data")
    fetch.add_argument("--base-url", type=str, help="Directory URL (default: $TOXIC_SPANS_DATA_URL)")
    fetch.set_defaults(func=cmd_fetch)

    prepare = subparsers.add_parser("prepare", help="Tokenize and label a dataset")
    prepare.add_argument("--data", type=str, required=True, help="Toxic spans CSV file")
    prepare.add_argument("--out-dir", type=str, required=True)
    prepare.add_argument("--split", choices=["train", "dev", "test"], default="train")
    prepare.add_argument("--format", choices=DATASET_FORMATS, help="Detected from the header by default")
    prepare.add_argument("--vocab", type=str, help="Existing vocabulary (not rebuilt)")
    prepare.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    prepare.add_argument("--workers", type=int, default=1)
    prepare.set_defaults(func=cmd_prepare)

    embed = subparsers.add_parser("embed", help="Build the embedding matrix")
    embed.add_argument("--vocab", type=str, required=True)
    embed.add_argument("--config", choices=list(EMBEDDING_CONFIGS), default="Ensemble")
    embed.add_argument("--glove", type=str, help="GloVe text file (default: $TOXIC_SPANS_GLOVE)")
    embed.add_argument("--out", type=str, required=True)
    embed.set_defaults(func=cmd_embed)

    train_parser = subparsers.add_parser("train", help="Train a tagger")
    train_parser.add_argument("--train", type=str, required=True, help="Prepared .jsonl or CSV")
    train_parser.add_argument("--dev", type=str, help="Prepared .jsonl or CSV")
    train_parser.add_argument("--vocab", type=str, required=True)
    train_parser.add_argument("--embeddings", type=str, required=True, help="Matrix file from `embed`")
    train_parser.add_argument("--out-dir", type=str, required=True)
    train_parser.add_argument("--workers", type=int, default=1)
    add_model_flags(train_parser)
    train_parser.set_defaults(func=cmd_train)

    predict_parser = subparsers.add_parser("predict", help="Predict toxic offsets")
    predict_parser.add_argument("--checkpoint", type=str, required=True)
    predict_parser.add_argument("--vocab", type=str, required=True)
    predict_parser.add_argument("--data", type=str, required=True, help="Prepared .jsonl or CSV")
    predict_parser.add_argument("--out", type=str, required=True)
    predict_parser.add_argument("--bridge-gaps", action="store_true",
                                help="Fill characters between consecutive toxic tokens")
    predict_parser.add_argument("--workers", type=int, default=1)
    predict_parser.set_defaults(func=cmd_predict)

    evaluate_parser = subparsers.add_parser("evaluate", help="Score predictions with span F1")
    evaluate_parser.add_argument("--gold", type=str, required=True, help="Gold .jsonl or CSV")
    evaluate_parser.add_argument("--predictions", type=str, required=True)
    evaluate_parser.add_argument("--out", type=str, help="JSON report path")
    evaluate_parser.set_defaults(func=cmd_evaluate)

    ablate = subparsers.add_parser("ablate", help="Run the model x embedding grid")
    ablate.add_argument("--train", type=str, required=True)
    ablate.add_argument("--dev", type=str, required=True)
    ablate.add_argument("--test", type=str)
    ablate.add_argument("--glove", type=str, help="GloVe text file (default: $TOXIC_SPANS_GLOVE)")
    ablate.add_argument("--out-dir", type=str, required=True)
    ablate.add_argument("--only", action="append", help="Run one cell, e.g. BiGRU+Attention:Ensemble (repeatable)")
    ablate.add_argument("--workers", type=int, default=1, help="Cells trained in parallel")
    add_model_flags(ablate)
    ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s | %(levelname)s | %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError) as e:
        print(f"Error [{args.command}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
