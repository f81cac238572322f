"""Toxic spans detection toolkit."""

__version__ = "0.1.0"

# Sequence and training defaults
DEFAULT_MAX_LEN = 215
DEFAULT_BATCH_SIZE = 32
DEFAULT_EPOCHS = 10
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_HIDDEN_SIZE = 64
DEFAULT_DENSE_UNITS = 50
DEFAULT_SEED = 42

# Embedding sources
DEFAULT_GPT2_MODEL = "gpt2"
DEFAULT_ROBERTA_MODEL = "roberta-base"
GLOVE_DIM = 300
LM_DIM = 768

# Default paths
DEFAULT_VECTOR_CACHE = "~/.cache/toxic_spans"
DEFAULT_DATA_URL = "https://raw.githubusercontent.com/ipavlopoulos/toxic_spans/master/SemEval2021/data"

__all__ = ["corpus", "embeddings", "model", "evaluation", "cli",
           "DEFAULT_MAX_LEN", "DEFAULT_BATCH_SIZE", "DEFAULT_EPOCHS",
           "DEFAULT_LEARNING_RATE", "DEFAULT_HIDDEN_SIZE", "DEFAULT_DENSE_UNITS",
           "DEFAULT_SEED", "DEFAULT_GPT2_MODEL", "DEFAULT_ROBERTA_MODEL",
           "GLOVE_DIM", "LM_DIM", "DEFAULT_VECTOR_CACHE", "DEFAULT_DATA_URL"]
