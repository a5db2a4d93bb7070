"""Model assembly: stacked pre-norm blocks with a tied embedding head.

Also home to the model-level bookkeeping the tooling needs: named
presets, deterministic initialization, a per-bucket parameter census,
an inference view with materialized (optionally bit-packed) projection
matrices, greedy generation, and the byte-level tokenizer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fbi import FbiLinearParams, PackedMatrix, effective_weight, pack_params, unpack
from .ssd import (
    RecurrentState,
    SsdBlockParams,
    _rmsnorm_np,
    block_forward,
    block_step,
    init_block,
    rmsnorm,
)
from .tensor import Tensor

BOS = 256
EOS = 257
BYTE_VOCAB = 258

SCOPES = ("full", "partial", "none")


@dataclass
class ModelConfig:
    d_model: int
    n_layer: int
    vocab_size: int
    n_heads: int
    d_state: int = 128
    d_conv: int = 4
    expand: int = 2
    scope: str = "full"  # which projections binarize: both, input-only, neither
    census_vocab: int | None = None  # padded vocabulary used for size accounting

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if (self.expand * self.d_model) % self.n_heads:
            raise ValueError("expand*d_model must be divisible by n_heads")
        for name in ("d_model", "n_layer", "vocab_size", "n_heads", "d_state", "d_conv", "expand"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_inner // self.n_heads

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.d_state

    @property
    def d_in_proj(self) -> int:
        return 2 * self.d_inner + 2 * self.d_state + self.n_heads

    @property
    def accounting_vocab(self) -> int:
        return self.census_vocab if self.census_vocab is not None else self.vocab_size

    def scope_flags(self) -> tuple[bool, bool]:
        return {"full": (True, True), "partial": (True, False), "none": (False, False)}[self.scope]


PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(d_model=64, n_layer=2, vocab_size=BYTE_VOCAB, n_heads=4, d_state=16),
    "small": ModelConfig(d_model=128, n_layer=4, vocab_size=BYTE_VOCAB, n_heads=8, d_state=16),
    "780M": ModelConfig(d_model=1536, n_layer=48, vocab_size=32000, n_heads=48, census_vocab=50288),
    "1.3B": ModelConfig(d_model=2048, n_layer=48, vocab_size=32000, n_heads=64, census_vocab=50288),
    "2.7B": ModelConfig(d_model=2560, n_layer=64, vocab_size=32000, n_heads=80, census_vocab=50288),
}


def get_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


@dataclass
class BiMambaModel:
    config: ModelConfig
    embedding: Tensor  # (vocab, d_model); also the output head (tied)
    pre_norms: list[Tensor]
    layers: list[SsdBlockParams]
    final_norm: Tensor


def init_model(cfg: ModelConfig, seed: int) -> BiMambaModel:
    """Deterministic init: one child RNG stream per component."""
    children = np.random.SeedSequence(seed).spawn(cfg.n_layer + 1)
    emb_rng = np.random.default_rng(children[0])
    scope_in, scope_out = cfg.scope_flags()
    layers, pre_norms = [], []
    for i in range(cfg.n_layer):
        rng = np.random.default_rng(children[i + 1])
        layers.append(
            init_block(
                d_model=cfg.d_model,
                n_heads=cfg.n_heads,
                d_state=cfg.d_state,
                d_conv=cfg.d_conv,
                expand=cfg.expand,
                n_layer=cfg.n_layer,
                scope_in=scope_in,
                scope_out=scope_out,
                rng=rng,
            )
        )
        pre_norms.append(Tensor(np.ones(cfg.d_model), requires_grad=True))
    return BiMambaModel(
        config=cfg,
        embedding=Tensor(emb_rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True),
        pre_norms=pre_norms,
        layers=layers,
        final_norm=Tensor(np.ones(cfg.d_model), requires_grad=True),
    )


def model_forward(model: BiMambaModel, tokens: np.ndarray) -> Tensor:
    """Logits (L, vocab) for a token id sequence (L,)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("model_forward: tokens must be a non-empty 1-d array")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise ValueError("model_forward: token id out of range")
    x = T.take_rows(model.embedding, tokens)
    for pre_norm, block in zip(model.pre_norms, model.layers):
        x = T.add(x, block_forward(rmsnorm(x, pre_norm), block))
    x = rmsnorm(x, model.final_norm)
    return T.linear(x, model.embedding)


def named_parameters(model: BiMambaModel) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) ordering shared by optimizer and checkpoint."""
    out: list[tuple[str, Tensor]] = [("embedding", model.embedding)]
    for i, (pre, blk) in enumerate(zip(model.pre_norms, model.layers)):
        pfx = f"layers.{i}."
        out.append((pfx + "pre_norm", pre))
        for role, layer in (("in_proj", blk.in_proj), ("out_proj", blk.out_proj)):
            if isinstance(layer, FbiLinearParams):
                out.append((pfx + role + ".weight", layer.weight))
                out.append((pfx + role + ".alpha", layer.alpha))
                out.append((pfx + role + ".beta", layer.beta))
            else:
                out.append((pfx + role + ".weight", layer.weight))
        out.append((pfx + "conv_weight", blk.conv_weight))
        out.append((pfx + "conv_bias", blk.conv_bias))
        out.append((pfx + "dt_bias", blk.dt_bias))
        out.append((pfx + "A_log", blk.A_log))
        out.append((pfx + "D", blk.D))
        out.append((pfx + "norm_weight", blk.norm_weight))
    out.append(("final_norm", model.final_norm))
    return out


CENSUS_BUCKETS = ("Embedding", "LN", "dt_bias", "A", "D", "Conv1d", "In Proj.", "Out Proj.")


def param_census(cfg: ModelConfig) -> dict[str, int]:
    """Per-bucket parameter counts of the dense architecture.

    Uses the padded accounting vocabulary; binarization extras (per-layer
    scale/shift vectors) are storage overhead, not architecture parameters,
    and are excluded here.  The tied embedding is counted once.
    """
    nl = cfg.n_layer
    return {
        "Embedding": cfg.accounting_vocab * cfg.d_model,
        "LN": nl * (cfg.d_inner + cfg.d_model) + cfg.d_model,
        "dt_bias": nl * cfg.n_heads,
        "A": nl * cfg.n_heads,
        "D": nl * cfg.n_heads,
        "Conv1d": nl * (cfg.d_conv * cfg.conv_dim + cfg.conv_dim),
        "In Proj.": nl * cfg.d_in_proj * cfg.d_model,
        "Out Proj.": nl * cfg.d_model * cfg.d_inner,
    }


def total_params(cfg: ModelConfig) -> int:
    return sum(param_census(cfg).values())


# === inference view ===


@dataclass
class InferenceModel:
    """Read-only model with materialized projections (dense or packed)."""

    config: ModelConfig
    embedding: np.ndarray
    pre_norms: list[np.ndarray]
    layers: list[SsdBlockParams]
    final_norm: np.ndarray
    packed: bool

    @property
    def weight_bytes(self) -> int:
        total = self.embedding.nbytes + self.final_norm.nbytes + sum(w.nbytes for w in self.pre_norms)
        for blk in self.layers:
            for layer in (blk.in_proj, blk.out_proj):
                total += layer.nbytes
            total += (
                blk.conv_weight.data.nbytes
                + blk.conv_bias.data.nbytes
                + blk.dt_bias.data.nbytes
                + blk.A_log.data.nbytes
                + blk.D.data.nbytes
                + blk.norm_weight.data.nbytes
            )
        return total


def prepare_inference(model: BiMambaModel, packed: bool = True) -> InferenceModel:
    """Materialize projections: binarized layers pack to bit-planes when
    `packed`, otherwise to their dense fp32 effective weights."""

    def materialize(layer):
        if isinstance(layer, FbiLinearParams):
            return pack_params(layer) if packed else effective_weight(layer).astype(np.float32)
        return layer.weight.data.astype(np.float32)

    layers = [
        dataclasses.replace(blk, in_proj=materialize(blk.in_proj), out_proj=materialize(blk.out_proj))
        for blk in model.layers
    ]
    return InferenceModel(
        config=model.config,
        embedding=model.embedding.data.astype(np.float32),
        pre_norms=[w.data.astype(np.float32) for w in model.pre_norms],
        layers=layers,
        final_norm=model.final_norm.data.astype(np.float32),
        packed=packed,
    )


def densify_inference(inf: InferenceModel) -> InferenceModel:
    """Dense fp32 twin of a packed inference view.

    Bit planes carry the exact signs and per-column alpha/beta, so the
    reconstructed matrices are bitwise equal to the dense view produced by
    prepare_inference on the original trainable model.
    """

    def widen(layer):
        if isinstance(layer, PackedMatrix):
            return unpack(layer) * layer.alpha[None, :] + layer.beta[None, :]
        return layer

    layers = [
        dataclasses.replace(blk, in_proj=widen(blk.in_proj), out_proj=widen(blk.out_proj))
        for blk in inf.layers
    ]
    return dataclasses.replace(inf, layers=layers, packed=False)


def init_states(inf: InferenceModel) -> list[RecurrentState]:
    return [RecurrentState.zeros(blk) for blk in inf.layers]


def model_step(inf: InferenceModel, token: int, states: list[RecurrentState]) -> np.ndarray:
    """Advance every layer by one token (mutating states); returns logits."""
    if not 0 <= token < inf.config.vocab_size:
        raise ValueError(f"token id {token} out of range")
    x = inf.embedding[token]
    for pre, blk, state in zip(inf.pre_norms, inf.layers, states):
        y, _ = block_step(_rmsnorm_np(x, pre), state, blk)
        x = x + y
    x = _rmsnorm_np(x, inf.final_norm)
    return inf.embedding @ x


def generate(
    inf: InferenceModel,
    prompt: np.ndarray,
    n_tokens: int,
    temperature: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Continue a prompt on the recurrent step path.

    temperature=0 is greedy argmax; temperature>0 samples from the seeded
    softmax. Returns the prompt followed by the n_tokens new ids.
    """
    prompt = np.asarray(prompt)
    if prompt.ndim != 1 or prompt.size == 0:
        raise ValueError("generate: prompt must be a non-empty 1-d array")
    vocab = inf.config.vocab_size
    if np.any(prompt < 0) or np.any(prompt >= vocab):
        raise ValueError(f"generate: prompt ids must lie in [0, {vocab})")
    if n_tokens < 1:
        raise ValueError("generate: n_tokens must be >= 1")
    if temperature < 0:
        raise ValueError("generate: temperature must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed)) if temperature > 0 else None
    states = init_states(inf)
    logits = None
    for t in prompt:
        logits = model_step(inf, int(t), states)
    out = np.empty(n_tokens, dtype=np.int64)
    for i in range(n_tokens):
        if rng is None:
            tok = int(np.argmax(logits))
        else:
            z = logits.astype(np.float64) / temperature
            p = np.exp(z - z.max())
            tok = int(rng.choice(vocab, p=p / p.sum()))
        out[i] = tok
        if i + 1 < n_tokens:
            logits = model_step(inf, tok, states)
    return np.concatenate([prompt.astype(np.int64), out])


# === byte tokenizer ===


def encode(text: str | bytes, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
    """Bytes become ids 0..255; BOS=256 and EOS=257 are optional framing."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = list(raw)
    if add_bos:
        ids.insert(0, BOS)
    if add_eos:
        ids.append(EOS)
    return np.asarray(ids, dtype=np.int64)


def decode(tokens: np.ndarray) -> str:
    """Inverse of encode: framing tokens are dropped, bytes are UTF-8."""
    data = bytes(int(t) for t in np.asarray(tokens) if int(t) < 256)
    return data.decode("utf-8", errors="replace")
