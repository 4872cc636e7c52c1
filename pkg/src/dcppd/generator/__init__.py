"""Cue-conditioned report generator."""
from .model import (
    Decoder,
    DecoderConfig,
    GeneratorShapeError,
    LoRALinear,
    ProjectorConfig,
    VisionProjector,
    project,
)
from .tokenizer import Vocabulary, VocabularyError, default_vocab, detokenize, tokenize
from .training import (
    FreezeViolation,
    GenConfig,
    GenData,
    Generation,
    GeneratorDivergenceError,
    PretrainQualityError,
    PromptSequence,
    assemble_prompt,
    build_models,
    decoder_checksum,
    generate,
    pretrain_decoder,
    train_stage1,
    train_stage2,
)
