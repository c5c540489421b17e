"""Desk-scale end-to-end model with a frozen backbone and a two-tensor
trainable set.

Structure: a frozen per-image feature stub stands in for a vision encoder;
a trainable linear projection lifts its features to the decoder width;
text positions use a trainable embedding; a stack of frozen decoder blocks
(multi-head attention in a chosen variant, then a tanh feedforward, both
with residual connections) runs over the mixed sequence; the output head
is tied to the embedding transpose, so the trainable set is exactly
{projection, embedding}.

The loss is next-token cross-entropy restricted to positions whose target
token carries the loss mask, i.e. answer tokens only. Gradients are
hand-written (double precision, recompute-style backward) and reach only
the two trainable tensors; frozen parameters have no gradient storage and
are shared, bit-identical, between a model and its trained successors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .attn import (
    AttentionConfig,
    MultiHeadParams,
    init_multi_head_params,
    multi_head_forward,
    multi_head_input_vjp,
)
from .mask import AttentionVariant
from .modseq import LayoutConfig, image_blocks
from .template import Conversation, HashTokenizer, RenderedSample, Round, render

GradDict = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """Toy dimensions, sized so brute-force reference evaluations run in
    milliseconds. All knobs are free; the defaults keep finite-difference
    checks of the full model cheap."""

    vision_dim: int = 8
    model_dim: int = 16
    num_heads: int = 2
    num_layers: int = 2
    vocab_size: int = 32
    ffn_dim: int = 32
    image_token_count: int = 4
    variant: AttentionVariant = AttentionVariant.MMCA
    normalize_dual_softmax: bool = False
    image_self: str = "block"

    def __post_init__(self) -> None:
        for name in ("vision_dim", "model_dim", "num_heads", "num_layers",
                     "vocab_size", "ffn_dim", "image_token_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            variant=self.variant,
            num_heads=self.num_heads,
            model_dim=self.model_dim,
            normalize_dual_softmax=self.normalize_dual_softmax,
            image_self=self.image_self,
        )

    def layout(self, max_sequence_length: int = 4096) -> LayoutConfig:
        return LayoutConfig(self.image_token_count, max_sequence_length)


@dataclass
class DecoderBlock:
    """One frozen block: multi-head attention + tanh feedforward, each with
    a residual connection and no normalization layers."""

    attn: MultiHeadParams
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def param_count(self) -> int:
        return (
            self.attn.param_count()
            + self.w1.size + self.b1.size + self.w2.size + self.b2.size
        )


@dataclass
class ToyModel:
    """Parameter store split into a trainable part (projection, embedding)
    and a frozen part (decoder blocks, vision stub)."""

    config: ModelConfig
    projection: np.ndarray
    embedding: np.ndarray
    blocks: tuple[DecoderBlock, ...]
    vision_stub: dict[str, np.ndarray]
    stub_seed: int

    def trainable_params(self) -> GradDict:
        return {"projection": self.projection, "embedding": self.embedding}

    def trainable_param_count(self) -> int:
        return self.projection.size + self.embedding.size

    def decoder_param_count(self) -> int:
        return sum(block.param_count() for block in self.blocks)

    def frozen_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """All frozen tensors under stable names, in a fixed order."""
        for i, block in enumerate(self.blocks):
            yield f"block{i}.attn.wq", block.attn.wq
            yield f"block{i}.attn.wk", block.attn.wk
            yield f"block{i}.attn.wv", block.attn.wv
            yield f"block{i}.attn.wo", block.attn.wo
            if block.attn.wkx is not None:
                yield f"block{i}.attn.wkx", block.attn.wkx
            if block.attn.wvx is not None:
                yield f"block{i}.attn.wvx", block.attn.wvx
            yield f"block{i}.w1", block.w1
            yield f"block{i}.b1", block.b1
            yield f"block{i}.w2", block.w2
            yield f"block{i}.b2", block.b2
        for image_id in sorted(self.vision_stub):
            yield f"stub.{image_id}", self.vision_stub[image_id]


def vision_features(stub_seed: int, image_id: str, shape: tuple[int, int]) -> np.ndarray:
    """Fixed pseudo-random features for one image id. Keyed by a content
    hash of (seed, id) so the mapping is independent of registration order."""
    digest = hashlib.blake2b(
        f"{stub_seed}:{image_id}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    return rng.standard_normal(shape)


def make_model(
    config: ModelConfig, seed: int = 0, known_images: tuple[str, ...] = ()
) -> ToyModel:
    """Build a model with randomly initialized parameters and a vision stub
    covering ``known_images``; any other image id is rejected at forward
    time."""
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal(
        (config.vision_dim, config.model_dim)
    ) / math.sqrt(config.vision_dim)
    embedding = rng.standard_normal(
        (config.vocab_size, config.model_dim)
    ) / math.sqrt(config.model_dim)
    attn_config = config.attention_config()
    blocks = []
    for _ in range(config.num_layers):
        blocks.append(
            DecoderBlock(
                attn=init_multi_head_params(attn_config, rng),
                w1=rng.standard_normal((config.model_dim, config.ffn_dim))
                / math.sqrt(config.model_dim),
                b1=np.zeros(config.ffn_dim),
                w2=rng.standard_normal((config.ffn_dim, config.model_dim))
                / math.sqrt(config.ffn_dim),
                b2=np.zeros(config.model_dim),
            )
        )
    stub_shape = (config.image_token_count, config.vision_dim)
    stub = {
        image_id: vision_features(seed, image_id, stub_shape)
        for image_id in known_images
    }
    return ToyModel(
        config=config,
        projection=projection,
        embedding=embedding,
        blocks=tuple(blocks),
        vision_stub=stub,
        stub_seed=seed,
    )


def _sample_blocks(model: ToyModel, sample: RenderedSample) -> list[tuple[str, int, int]]:
    """(image_id, start, end) for each image block, validated against the
    stub and the configured per-image token count."""
    out = []
    for index, (_, start, end) in enumerate(image_blocks(sample.tags)):
        image_id = sample.image_ids[index]
        if image_id not in model.vision_stub:
            raise ValueError(f"unknown image id: {image_id!r}")
        if end - start != model.config.image_token_count:
            raise ValueError(
                f"image block has {end - start} tokens; "
                f"model expects {model.config.image_token_count}"
            )
        out.append((image_id, start, end))
    return out


def _embed(model: ToyModel, sample: RenderedSample) -> np.ndarray:
    token_ids = np.asarray(sample.token_ids)
    if token_ids.max() >= model.config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    x = model.embedding[token_ids].copy()
    for image_id, start, end in _sample_blocks(model, sample):
        x[start:end] = model.vision_stub[image_id] @ model.projection
    return x


def _decoder_states(
    model: ToyModel, sample: RenderedSample, x: np.ndarray
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Run the frozen blocks, keeping (input, post-attention) activations
    per block so the backward pass can recompute the rest."""
    cfg = model.config.attention_config()
    states = []
    h = x
    for block in model.blocks:
        h_mid = h + multi_head_forward(cfg, h, block.attn, sample.tags)
        states.append((h, h_mid))
        h = h_mid + np.tanh(h_mid @ block.w1 + block.b1) @ block.w2 + block.b2
    return h, states


def forward(model: ToyModel, sample: RenderedSample) -> np.ndarray:
    """Logits (d x vocab_size) for every position. Image positions enter as
    projected stub features, text positions as embedding rows; the head is
    the embedding transpose."""
    h, _ = _decoder_states(model, sample, _embed(model, sample))
    logits = h @ model.embedding.T
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return logits


def _target_positions(sample: RenderedSample) -> np.ndarray:
    """Positions t whose next token (the prediction target) is loss-masked."""
    mask = np.asarray(sample.loss_mask, dtype=bool)
    return np.flatnonzero(mask[1:])


def answer_loss(logits: np.ndarray, sample: RenderedSample) -> float:
    """Mean next-token cross-entropy over positions whose target carries
    the loss mask. Logits anywhere else cannot affect the value."""
    loss, _ = _loss_and_dlogits(np.asarray(logits, dtype=np.float64), sample)
    return loss


def _loss_and_dlogits(
    logits: np.ndarray, sample: RenderedSample
) -> tuple[float, np.ndarray]:
    positions = _target_positions(sample)
    if positions.size == 0:
        raise ValueError("sample has no loss-masked targets")
    token_ids = np.asarray(sample.token_ids)
    targets = token_ids[positions + 1]
    rows = logits[positions]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -float(np.mean(log_probs[np.arange(positions.size), targets]))
    dlogits = np.zeros_like(logits)
    probs = np.exp(log_probs)
    probs[np.arange(positions.size), targets] -= 1.0
    dlogits[positions] = probs / positions.size
    return loss, dlogits


def loss_and_param_grads(
    model: ToyModel, sample: RenderedSample
) -> tuple[float, GradDict]:
    """Answer loss and its gradients w.r.t. the two trainable tensors.

    The embedding gradient collects both of its roles: output head
    (tied transpose) and input rows at text positions.
    """
    x = _embed(model, sample)
    h, states = _decoder_states(model, sample, x)
    logits = h @ model.embedding.T
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    loss, dlogits = _loss_and_dlogits(logits, sample)

    d_embedding = dlogits.T @ h
    dh = dlogits @ model.embedding
    cfg = model.config.attention_config()
    for block, (h_in, h_mid) in zip(reversed(model.blocks), reversed(states)):
        a = np.tanh(h_mid @ block.w1 + block.b1)
        dh_mid = dh + ((dh @ block.w2.T) * (1.0 - a * a)) @ block.w1.T
        dh = dh_mid + multi_head_input_vjp(cfg, h_in, block.attn, sample.tags, dh_mid)

    token_ids = np.asarray(sample.token_ids)
    is_image = sample.tags.is_image()
    d_projection = np.zeros_like(model.projection)
    for image_id, start, end in _sample_blocks(model, sample):
        d_projection += model.vision_stub[image_id].T @ dh[start:end]
    text = np.flatnonzero(~is_image)
    np.add.at(d_embedding, token_ids[text], dh[text])
    return loss, {"projection": d_projection, "embedding": d_embedding}


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimState:
    """Moment-based optimizer with decoupled weight decay and a linear
    warmup over the first ``warmup_fraction`` of ``total_steps``. Moment
    buffers exist only for trainable parameters."""

    total_steps: int
    learning_rate: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.95
    warmup_fraction: float = 0.10
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: GradDict = field(default_factory=dict)
    v: GradDict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.learning_rate < 0.0 or self.weight_decay < 0.0:
            raise ValueError("learning_rate and weight_decay must be >= 0")

    def current_learning_rate(self) -> float:
        warmup_steps = math.ceil(self.warmup_fraction * self.total_steps)
        if self.step < warmup_steps:
            return self.learning_rate * (self.step + 1) / warmup_steps
        return self.learning_rate


def train_step(
    model: ToyModel, batch: list[RenderedSample], opt: OptimState
) -> tuple[float, ToyModel]:
    """One optimizer step on the batch-mean loss. Returns the loss and a
    successor model whose frozen parts are the very same arrays; only the
    two trainable tensors are replaced."""
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    total_loss = 0.0
    grads = {
        "projection": np.zeros_like(model.projection),
        "embedding": np.zeros_like(model.embedding),
    }
    for sample in batch:
        loss, g = loss_and_param_grads(model, sample)
        total_loss += loss
        for name in grads:
            grads[name] += g[name]
    loss = total_loss / len(batch)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    for name in grads:
        grads[name] /= len(batch)

    lr = opt.current_learning_rate()
    opt.step += 1
    t = opt.step
    params = model.trainable_params()
    updated: GradDict = {}
    for name, grad in grads.items():
        if name not in opt.m:
            opt.m[name] = np.zeros_like(grad)
            opt.v[name] = np.zeros_like(grad)
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * grad
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * grad * grad
        m_hat = opt.m[name] / (1.0 - opt.beta1**t)
        v_hat = opt.v[name] / (1.0 - opt.beta2**t)
        param = params[name]
        updated[name] = param - lr * (
            m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * param
        )
    return loss, replace(
        model, projection=updated["projection"], embedding=updated["embedding"]
    )


def frozen_fingerprint(model: ToyModel) -> str:
    """Content hash over every frozen tensor plus the stub seed; unchanged
    by any number of training steps."""
    digest = hashlib.sha256()
    digest.update(f"stub_seed={model.stub_seed}".encode("utf-8"))
    for name, array in model.frozen_arrays():
        contiguous = np.ascontiguousarray(array, dtype=np.float64)
        digest.update(f"{name}:{contiguous.shape}".encode("utf-8"))
        digest.update(contiguous.tobytes())
    return digest.hexdigest()


def train_loop(
    model: ToyModel,
    batch: list[RenderedSample],
    steps: int,
    opt: OptimState | None = None,
    csv_path: str | Path | None = None,
) -> tuple[ToyModel, list[float]]:
    """Run ``steps`` full-batch updates; optionally write a (step, loss)
    curve as CSV."""
    if opt is None:
        opt = OptimState(total_steps=steps)
    losses: list[float] = []
    for _ in range(steps):
        loss, model = train_step(model, batch, opt)
        losses.append(loss)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "loss"])
            for step, loss in enumerate(losses):
                writer.writerow([step, f"{loss:.10f}"])
    return model, losses


def make_copy_task(
    config: ModelConfig, num_images: int = 8
) -> tuple[list[RenderedSample], tuple[str, ...]]:
    """Synthetic task: each sample shows one image and the answer is that
    image's id, so predicting the answer token requires reading the image
    block through attention. Learnable by projection + embedding alone."""
    image_ids = tuple(f"img{i}" for i in range(num_images))
    tokenizer = HashTokenizer(config.vocab_size)
    layout = config.layout()
    samples = []
    for image_id in image_ids:
        conv = Conversation(
            system="Name the image.",
            rounds=(Round(images=(image_id,), question="Which image is this?", answer=image_id),),
        )
        samples.append(render(conv, tokenizer, layout))
    return samples, image_ids


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_FORMAT_VERSION = 1


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "vision_dim": config.vision_dim,
        "model_dim": config.model_dim,
        "num_heads": config.num_heads,
        "num_layers": config.num_layers,
        "vocab_size": config.vocab_size,
        "ffn_dim": config.ffn_dim,
        "image_token_count": config.image_token_count,
        "variant": config.variant.value,
        "normalize_dual_softmax": config.normalize_dual_softmax,
        "image_self": config.image_self,
    }


def _config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    data["variant"] = AttentionVariant(data["variant"])
    return ModelConfig(**data)


def save_model(model: ToyModel, path: str | Path) -> None:
    """Versioned checkpoint: named tensors plus a JSON manifest."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": _config_to_dict(model.config),
        "stub_seed": model.stub_seed,
        "known_images": sorted(model.vision_stub),
    }
    arrays: dict[str, np.ndarray] = {
        "projection": model.projection,
        "embedding": model.embedding,
    }
    for name, array in model.frozen_arrays():
        arrays[name] = array
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_model(path: str | Path) -> ToyModel:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format: {manifest.get('format_version')!r}"
            )
        config = _config_from_dict(manifest["config"])
        blocks = []
        for i in range(config.num_layers):
            attn = MultiHeadParams(
                wq=data[f"block{i}.attn.wq"],
                wk=data[f"block{i}.attn.wk"],
                wv=data[f"block{i}.attn.wv"],
                wo=data[f"block{i}.attn.wo"],
                wkx=data[f"block{i}.attn.wkx"] if f"block{i}.attn.wkx" in data else None,
                wvx=data[f"block{i}.attn.wvx"] if f"block{i}.attn.wvx" in data else None,
            )
            blocks.append(
                DecoderBlock(
                    attn=attn,
                    w1=data[f"block{i}.w1"],
                    b1=data[f"block{i}.b1"],
                    w2=data[f"block{i}.w2"],
                    b2=data[f"block{i}.b2"],
                )
            )
        stub = {
            image_id: data[f"stub.{image_id}"]
            for image_id in manifest["known_images"]
        }
        return ToyModel(
            config=config,
            projection=data["projection"],
            embedding=data["embedding"],
            blocks=tuple(blocks),
            vision_stub=stub,
            stub_seed=manifest["stub_seed"],
        )
