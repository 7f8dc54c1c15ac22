"""Blockwise full-duplex dialogue decoding with staged intermediate targets."""

from .align import Alignment, EmissionMatrix, brute_force_align, collapse, forced_align
from .core import BlockPlan, Conversation, FrameStream, Mode, WordSpan, partition_blocks, vad_segment
from .engine import EngineConfig, StageTrace, run_conversation, run_duplex, run_turn_based
from .evaluation import MetricsReport, evaluate, perplexity, rouge
from .models import DecodeParams, NGramModel, ScriptedModel, ToyCodec, UniformModel, ngram_train
from .targets import Stage, Variant, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Alignment", "EmissionMatrix", "brute_force_align", "collapse", "forced_align",
    "BlockPlan", "Conversation", "FrameStream", "Mode", "WordSpan", "partition_blocks", "vad_segment",
    "EngineConfig", "StageTrace", "run_conversation", "run_duplex", "run_turn_based",
    "MetricsReport", "evaluate", "perplexity", "rouge",
    "DecodeParams", "NGramModel", "ScriptedModel", "ToyCodec", "UniformModel", "ngram_train",
    "Stage", "Variant", "Vocabulary",
]
