"""Dense retrieval for technical documentation.

Documents are chunked, each document gets an attention-weighted extractive
summary that is prepended to its chunks, and a small dual encoder is first
pre-trained and then adapted through learned soft prompts on real plus
synthetic queries.
"""

from .corpus import Chunk, Corpus, Document, Vocabulary, ingest, tokenize
from .encoder import Checkpoint, EncoderConfig, TrainConfig, load_checkpoint, save_checkpoint
from .evaluation import MetricsReport, Qrels, evaluate
from .index import VectorIndex, build_index, load_index, save_index, search

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Chunk",
    "Corpus",
    "Document",
    "EncoderConfig",
    "MetricsReport",
    "Qrels",
    "TrainConfig",
    "VectorIndex",
    "Vocabulary",
    "build_index",
    "evaluate",
    "ingest",
    "load_checkpoint",
    "load_index",
    "save_checkpoint",
    "save_index",
    "search",
    "tokenize",
]
