"""Modality-aware causal attention with dual-softmax text rows, the
conversation template with answer-only loss, data blending, and a toy
frozen-decoder model."""

from .attn import (
    AttentionConfig,
    AttentionInputs,
    CrossParams,
    MultiHeadParams,
    causal_forward,
    causal_vjp,
    cross_forward,
    cross_vjp,
    grad_check,
    init_multi_head_params,
    masked_softmax,
    masked_softmax_vjp,
    mmca_forward,
    mmca_vjp,
    multi_head_forward,
    multi_head_input_vjp,
    variant_grad_check,
)
from .blend import (
    BlendSpec,
    Dataset,
    SourceRecord,
    concat_blend,
    dataset_stats,
    filter_limits,
    llava_otter_blend,
    read_records,
    write_records,
)
from .mask import (
    FORBIDDEN,
    IMAGE_KEY,
    TEXT_KEY,
    AttentionVariant,
    MmcaMask,
    build_causal_mask,
    build_cross_mask,
    build_mask,
    build_mmca_mask,
    partition,
    render_mask,
)
from .modseq import (
    LayoutConfig,
    ModalitySequence,
    ModalityTag,
    TokenKind,
    build_sequence,
    image_blocks,
    segments,
)
from .template import (
    Conversation,
    HashTokenizer,
    OverLengthError,
    ParseError,
    RenderedSample,
    Round,
    loss_positions,
    parse,
    render,
    render_text,
)
from .toy_model import (
    ModelConfig,
    OptimState,
    ToyModel,
    answer_loss,
    forward,
    frozen_fingerprint,
    load_model,
    loss_and_param_grads,
    make_copy_task,
    make_model,
    save_model,
    train_loop,
    train_step,
)

__all__ = [
    "AttentionConfig",
    "AttentionInputs",
    "AttentionVariant",
    "BlendSpec",
    "Conversation",
    "CrossParams",
    "Dataset",
    "FORBIDDEN",
    "HashTokenizer",
    "IMAGE_KEY",
    "LayoutConfig",
    "MmcaMask",
    "ModalitySequence",
    "ModalityTag",
    "ModelConfig",
    "MultiHeadParams",
    "OptimState",
    "OverLengthError",
    "ParseError",
    "RenderedSample",
    "Round",
    "SourceRecord",
    "TEXT_KEY",
    "TokenKind",
    "ToyModel",
    "answer_loss",
    "build_causal_mask",
    "build_cross_mask",
    "build_mask",
    "build_mmca_mask",
    "build_sequence",
    "causal_forward",
    "causal_vjp",
    "concat_blend",
    "cross_forward",
    "cross_vjp",
    "dataset_stats",
    "filter_limits",
    "forward",
    "frozen_fingerprint",
    "grad_check",
    "image_blocks",
    "init_multi_head_params",
    "llava_otter_blend",
    "load_model",
    "loss_and_param_grads",
    "loss_positions",
    "make_copy_task",
    "make_model",
    "masked_softmax",
    "masked_softmax_vjp",
    "mmca_forward",
    "mmca_vjp",
    "multi_head_forward",
    "multi_head_input_vjp",
    "parse",
    "partition",
    "read_records",
    "render",
    "render_mask",
    "render_text",
    "save_model",
    "segments",
    "train_loop",
    "train_step",
    "variant_grad_check",
    "write_records",
]

__version__ = "0.1.0"
