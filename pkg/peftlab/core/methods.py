"""
Tuner Primitives
================
The injection bodies behind every PEFT method. A method manifest composes one
or more of these primitives; ``peft.attach`` freezes the base model, runs the
primitives and folds their ``Injection`` records into an ``AttachHandle``.

Primitives (family in parentheses):
- lora: low-rank delta on named linears (reparametrized)
- prompt_tuning: trainable virtual-token block (soft_prompt)
- prefix_tuning: trainable key/value prefix per layer, flat or MLP (soft_prompt)
- ptuning: virtual tokens produced by an MLP encoder (soft_prompt)
- ia3: elementwise rescaling of keys, values and FFN activations (adapter)
- bottleneck: sequential or parallel bottleneck adapters (adapter)
- selective: unfreeze base parameters matching name patterns (selective)

Each primitive also exposes a parameter-count formula used to cross-check
the enumeration of injected tensors.
"""
from __future__ import annotations

import fnmatch
import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from peftlab.core import numcore as nc
from peftlab.core.errors import ConfigError
from peftlab.core.model import ModelSpec, TransformerModel

logger = logging.getLogger(__name__)

INIT_STD = 0.02


# ============================================================================
# SETTINGS
# ============================================================================


class _Settings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class LoraSettings(_Settings):
    r: int = Field(default=2, ge=1)
    alpha: float = Field(default=4.0, gt=0)
    targets: list[str] = Field(default_factory=lambda: ["attn.q", "attn.v"], min_length=1)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


class PromptSettings(_Settings):
    num_virtual_tokens: int = Field(default=8, ge=1)
    init: Literal["random", "vocab_sample"] = "random"


class PrefixSettings(_Settings):
    prefix_len: int = Field(default=4, ge=1)
    reparam: Literal["flat", "mlp"] = "flat"
    mlp_hidden: int = Field(default=32, ge=1)


class PTuningSettings(_Settings):
    num_virtual_tokens: int = Field(default=8, ge=1)
    encoder_hidden: int = Field(default=32, ge=1)


class IA3Settings(_Settings):
    """Rescale sites are fixed: keys, values and the FFN activation."""


class BottleneckSettings(_Settings):
    bottleneck_dim: int = Field(default=4, ge=1)
    placement: Literal["sequential", "parallel"] = "sequential"


class SelectivePattern(_Settings):
    unfreeze_patterns: list[str] = Field(min_length=1)

    @field_validator("unfreeze_patterns")
    @classmethod
    def validate_patterns(cls, v):
        if any(not p for p in v):
            raise ValueError("patterns must be nonempty strings")
        return v


BITFIT_PRESET = SelectivePattern(unfreeze_patterns=[".bias", ".beta"])
LNTUNING_PRESET = SelectivePattern(unfreeze_patterns=[".gamma", ".beta"])


# ============================================================================
# INJECTION RECORDS
# ============================================================================


@dataclass
class HookRecord:
    """A structural change made to the model's hook table."""

    kind: Literal["site", "kv_prefix", "embed_prepend"]
    fn: Callable
    site: Optional[str] = None

    def remove(self, model: TransformerModel) -> None:
        if self.kind == "site":
            model.hooks.remove_transform(self.site, self.fn)
        elif self.kind == "kv_prefix" and model.hooks.kv_prefix is self.fn:
            model.hooks.kv_prefix = None
        elif self.kind == "embed_prepend" and model.hooks.embed_prepend is self.fn:
            model.hooks.embed_prepend = None


@dataclass
class Injection:
    """What one primitive did to the model."""

    injected: list[str] = field(default_factory=list)
    unfrozen: list[str] = field(default_factory=list)
    hooks: list[HookRecord] = field(default_factory=list)
    merge: Optional[Callable[[], None]] = None
    virtual_tokens: int = 0

    @property
    def mergeable(self) -> bool:
        return self.merge is not None


class _Injector:
    """Registers prefixed tensors and hooks on a model, recording each change."""

    def __init__(self, model: TransformerModel, prefix: str, rng: np.random.Generator):
        self.model = model
        self.prefix = prefix
        self.rng = rng
        self.record = Injection()

    def param(self, suffix: str, data: np.ndarray) -> nc.Tensor:
        name = f"{self.prefix}{suffix}"
        if name in self.model.params:
            raise ConfigError(f"parameter {name} already exists on the model")
        tensor = nc.Tensor(data, requires_grad=True, name=name)
        self.model.params[name] = tensor
        self.record.injected.append(name)
        return tensor

    def normal(self, suffix: str, shape: tuple) -> nc.Tensor:
        return self.param(suffix, self.rng.normal(0.0, INIT_STD, size=shape))

    def zeros(self, suffix: str, shape: tuple) -> nc.Tensor:
        return self.param(suffix, np.zeros(shape))

    def ones(self, suffix: str, shape: tuple) -> nc.Tensor:
        return self.param(suffix, np.ones(shape))

    def transform(self, site: str, fn: Callable) -> None:
        self.model.hooks.add_transform(site, fn)
        self.record.hooks.append(HookRecord("site", fn, site))

    def kv_prefix(self, fn: Callable) -> None:
        if self.model.hooks.kv_prefix is not None:
            raise ConfigError("a key/value prefix is already installed on this model")
        self.model.hooks.kv_prefix = fn
        self.record.hooks.append(HookRecord("kv_prefix", fn))

    def embed_prepend(self, fn: Callable, count: int) -> None:
        if self.model.hooks.embed_prepend is not None:
            raise ConfigError("virtual tokens are already installed on this model")
        self.model.hooks.embed_prepend = fn
        self.record.hooks.append(HookRecord("embed_prepend", fn))
        self.record.virtual_tokens = count


def _linear(x: nc.Tensor, weight: nc.Tensor, bias: nc.Tensor) -> nc.Tensor:
    return nc.add(nc.matmul(x, nc.transpose(weight)), bias)


def _mlp(x: nc.Tensor, w1: nc.Tensor, b1: nc.Tensor, w2: nc.Tensor, b2: nc.Tensor) -> nc.Tensor:
    return _linear(nc.gelu(_linear(x, w1, b1)), w2, b2)


# ============================================================================
# REPARAMETRIZED
# ============================================================================


def resolve_targets(model: TransformerModel, targets: list[str]) -> list[str]:
    """Linear sites whose dotted name ends with one of ``targets``."""
    sites = model.linear_sites()
    matched = []
    for target in targets:
        hits = [s for s in sites if s == target or s.endswith(f".{target}")]
        if not hits:
            raise ConfigError(
                f"target '{target}' matches no linear layer; available: {sorted(set(s.split('.', 2)[-1] for s in sites))}"
            )
        matched.extend(h for h in hits if h not in matched)
    return matched


def apply_lora(model: TransformerModel, settings: LoraSettings, prefix: str, rng) -> Injection:
    """Add scaling·B·(A·x) to each target linear; B starts at zero."""
    injector = _Injector(model, prefix, rng)
    factors = []
    for site in resolve_targets(model, settings.targets):
        out_features, in_features = model.params[f"{site}.weight"].shape
        lora_a = injector.normal(f"{site}.A", (settings.r, in_features))
        lora_b = injector.zeros(f"{site}.B", (out_features, settings.r))
        factors.append((site, lora_a, lora_b))

        def delta(x, y, lora_a=lora_a, lora_b=lora_b):
            low_rank = nc.matmul(nc.matmul(x, nc.transpose(lora_a)), nc.transpose(lora_b))
            return nc.add(y, nc.scale(low_rank, settings.scaling))

        injector.transform(site, delta)

    def merge() -> None:
        for site, lora_a, lora_b in factors:
            weight = model.params[f"{site}.weight"]
            weight.data += settings.scaling * (lora_b.data @ lora_a.data)

    injector.record.merge = merge
    return injector.record


def lora_count(spec: ModelSpec, settings: LoraSettings, sites: list[tuple[int, int]]) -> int:
    """``sites`` lists (out_features, in_features) of each resolved target."""
    return sum(settings.r * (out_f + in_f) for out_f, in_f in sites)


# ============================================================================
# SOFT PROMPTS
# ============================================================================


def apply_prompt_tuning(model: TransformerModel, settings: PromptSettings, prefix: str, rng) -> Injection:
    """Prepend a trainable n×d block to the input embeddings."""
    injector = _Injector(model, prefix, rng)
    n, d = settings.num_virtual_tokens, model.spec.d_model
    if settings.init == "vocab_sample":
        vocab = model.spec.vocab_size
        rows = rng.choice(vocab, size=n, replace=n > vocab)
        prompt = injector.param("embeddings", model.params["tok_emb.weight"].data[rows])
    else:
        prompt = injector.normal("embeddings", (n, d))
    injector.embed_prepend(lambda: prompt, n)
    return injector.record


def prompt_count(spec: ModelSpec, settings: PromptSettings) -> int:
    return settings.num_virtual_tokens * spec.d_model


def apply_prefix_tuning(model: TransformerModel, settings: PrefixSettings, prefix: str, rng) -> Injection:
    """Prepend prefix_len key/value rows inside every attention layer."""
    injector = _Injector(model, prefix, rng)
    spec = model.spec
    p, d, layers = settings.prefix_len, spec.d_model, spec.n_layers

    if settings.reparam == "flat":
        blocks = [
            (injector.normal(f"layers.{i}.key", (p, d)), injector.normal(f"layers.{i}.value", (p, d)))
            for i in range(layers)
        ]

        def supply(layer: int):
            return blocks[layer]
    else:
        h = settings.mlp_hidden
        seed = injector.normal("seed", (p, d))
        w1 = injector.normal("mlp.0.weight", (h, d))
        b1 = injector.zeros("mlp.0.bias", (h,))
        w2 = injector.normal("mlp.1.weight", (2 * layers * d, h))
        b2 = injector.zeros("mlp.1.bias", (2 * layers * d,))
        cache: dict[str, nc.Tensor] = {}

        # layer 0 is always requested first within a forward pass
        def supply(layer: int):
            if layer == 0 or "out" not in cache:
                cache["out"] = _mlp(seed, w1, b1, w2, b2)
            out = cache["out"]
            start = 2 * layer * d
            return nc.slice_cols(out, start, start + d), nc.slice_cols(out, start + d, start + 2 * d)

    injector.kv_prefix(supply)
    return injector.record


def prefix_count(spec: ModelSpec, settings: PrefixSettings) -> int:
    p, d, layers = settings.prefix_len, spec.d_model, spec.n_layers
    if settings.reparam == "flat":
        return layers * 2 * p * d
    h = settings.mlp_hidden
    return p * d + (h * d + h) + (2 * layers * d * h + 2 * layers * d)


def apply_ptuning(model: TransformerModel, settings: PTuningSettings, prefix: str, rng) -> Injection:
    """Virtual tokens = MLP(seed embeddings), recomputed at every forward."""
    injector = _Injector(model, prefix, rng)
    n, d, h = settings.num_virtual_tokens, model.spec.d_model, settings.encoder_hidden
    seeds = injector.normal("seeds", (n, d))
    w1 = injector.normal("encoder.0.weight", (h, d))
    b1 = injector.zeros("encoder.0.bias", (h,))
    w2 = injector.normal("encoder.1.weight", (d, h))
    b2 = injector.zeros("encoder.1.bias", (d,))
    injector.embed_prepend(lambda: _mlp(seeds, w1, b1, w2, b2), n)
    return injector.record


def ptuning_count(spec: ModelSpec, settings: PTuningSettings) -> int:
    n, d, h = settings.num_virtual_tokens, spec.d_model, settings.encoder_hidden
    return n * d + (d * h + h) + (h * d + d)


# ============================================================================
# ADAPTERS
# ============================================================================


def apply_ia3(model: TransformerModel, settings: IA3Settings, prefix: str, rng) -> Injection:
    """Rescale keys and values after projection and the FFN after GELU."""
    injector = _Injector(model, prefix, rng)
    spec = model.spec
    for i in range(spec.n_layers):
        sites = {
            f"layers.{i}.attn.k": injector.ones(f"layers.{i}.l_k", (spec.d_model,)),
            f"layers.{i}.attn.v": injector.ones(f"layers.{i}.l_v", (spec.d_model,)),
            f"layers.{i}.ff.act": injector.ones(f"layers.{i}.l_ff", (spec.d_ff,)),
        }
        for site, vector in sites.items():
            injector.transform(site, lambda x, y, vector=vector: nc.mul(y, vector))
    return injector.record


def ia3_count(spec: ModelSpec, settings: IA3Settings) -> int:
    return spec.n_layers * (2 * spec.d_model + spec.d_ff)


def apply_bottleneck(model: TransformerModel, settings: BottleneckSettings, prefix: str, rng) -> Injection:
    """
    adapter(h) = h + W_up·GELU(W_down·h + b_down) + b_up, with W_up = 0 at init.

    Sequential placement wraps the attention and FFN sublayer outputs; parallel
    placement runs one adapter on the FFN input and adds it to the FFN output.
    """
    injector = _Injector(model, prefix, rng)
    d, b = model.spec.d_model, settings.bottleneck_dim

    def adapter(name: str):
        down_w = injector.normal(f"{name}.down.weight", (b, d))
        down_b = injector.zeros(f"{name}.down.bias", (b,))
        up_w = injector.zeros(f"{name}.up.weight", (d, b))
        up_b = injector.zeros(f"{name}.up.bias", (d,))
        return lambda h: _mlp(h, down_w, down_b, up_w, up_b)

    for i in range(model.spec.n_layers):
        if settings.placement == "sequential":
            for sub in ("attn", "ff"):
                block = adapter(f"layers.{i}.{sub}")
                injector.transform(f"layers.{i}.{sub}", lambda x, y, block=block: nc.add(y, block(y)))
        else:
            block = adapter(f"layers.{i}.ff")
            injector.transform(f"layers.{i}.ff", lambda x, y, block=block: nc.add(y, block(x)))
    return injector.record


def bottleneck_count(spec: ModelSpec, settings: BottleneckSettings) -> int:
    d, b = spec.d_model, settings.bottleneck_dim
    per_adapter = d * b + b + b * d + d
    per_layer = 2 if settings.placement == "sequential" else 1
    return spec.n_layers * per_layer * per_adapter


# ============================================================================
# SELECTIVE
# ============================================================================


def pattern_matches(name: str, pattern: str) -> bool:
    if any(ch in pattern for ch in "*?["):
        return fnmatch.fnmatchcase(name, pattern)
    return name.endswith(pattern)


def apply_selective(model: TransformerModel, settings: SelectivePattern, prefix: str, rng) -> Injection:
    """Unfreeze frozen base parameters matching any pattern; no structural change."""
    record = Injection()
    for name, tensor in model.params.items():
        if tensor.requires_grad:
            continue
        if any(pattern_matches(name, p) for p in settings.unfreeze_patterns):
            tensor.requires_grad = True
            record.unfrozen.append(name)
    if not record.unfrozen:
        raise ConfigError(f"patterns {settings.unfreeze_patterns} match no parameter")
    return record


def selective_count(model: TransformerModel, settings: SelectivePattern) -> int:
    return sum(
        t.size for name, t in model.params.items()
        if any(pattern_matches(name, p) for p in settings.unfreeze_patterns)
    )


# ============================================================================
# PRIMITIVE TABLE
# ============================================================================


@dataclass(frozen=True)
class Primitive:
    name: str
    settings: type
    apply: Callable[..., Injection]


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in (
        Primitive("lora", LoraSettings, apply_lora),
        Primitive("prompt_tuning", PromptSettings, apply_prompt_tuning),
        Primitive("prefix_tuning", PrefixSettings, apply_prefix_tuning),
        Primitive("ptuning", PTuningSettings, apply_ptuning),
        Primitive("ia3", IA3Settings, apply_ia3),
        Primitive("bottleneck", BottleneckSettings, apply_bottleneck),
        Primitive("selective", SelectivePattern, apply_selective),
    )
}


def expected_count(model: TransformerModel, primitive: str, settings) -> int:
    """Closed-form trainable count of one primitive on ``model``."""
    spec = model.spec
    if primitive == "lora":
        sites = [model.params[f"{s}.weight"].shape for s in resolve_targets(model, settings.targets)]
        return lora_count(spec, settings, sites)
    if primitive == "selective":
        return selective_count(model, settings)
    formulas = {
        "prompt_tuning": prompt_count,
        "prefix_tuning": prefix_count,
        "ptuning": ptuning_count,
        "ia3": ia3_count,
        "bottleneck": bottleneck_count,
    }
    return formulas[primitive](spec, settings)
