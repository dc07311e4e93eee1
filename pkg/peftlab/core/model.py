"""
Decoder-Only Transformer
========================
A tiny GPT-style language model on top of ``numcore`` with a hook table that
exposes every injection point the tuner families need.

Hook sites:
- linear outputs: ``layers.{i}.attn.{q,k,v,o}``, ``layers.{i}.ff.{up,down}``;
  transforms receive ``(input, output)``
- activation: ``layers.{i}.ff.act`` (after GELU)
- sublayers: ``layers.{i}.attn`` and ``layers.{i}.ff``; transforms receive
  the sublayer input and output before the residual add
- key/value prefix supplier per layer
- input-embedding prepend supplier (virtual tokens)

With an empty hook table the forward pass is the plain transformer.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from peftlab.core import numcore as nc
from peftlab.core.errors import ConfigError, DataError, LengthError

logger = logging.getLogger(__name__)

SiteTransform = Callable[[nc.Tensor, nc.Tensor], nc.Tensor]
PrefixSupplier = Callable[[int], Optional[tuple]]
PrependSupplier = Callable[[], nc.Tensor]


class ModelSpec(BaseModel):
    """Architecture hyperparameters of the toy decoder-only LM."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_layers: int = 2
    d_model: int = 16
    n_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 64
    max_seq: int = 64
    tie_output_head: bool = True
    ln_eps: float = 1e-5

    def check(self) -> None:
        """
        Validate architectural constraints.

        Raises:
            ConfigError: naming the first violated constraint
        """
        for key in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"model spec: {key} must be positive, got {getattr(self, key)}")
        if self.ln_eps <= 0:
            raise ConfigError(f"model spec: ln_eps must be positive, got {self.ln_eps}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"model spec: d_model ({self.d_model}) must be divisible by "
                f"n_heads ({self.n_heads})"
            )


REFERENCE_SPEC = ModelSpec()


def spec_fingerprint(spec: ModelSpec) -> str:
    """Stable SHA-256 over the spec fields."""
    canonical = json.dumps(spec.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class HookTable:
    """Per-site wrapper slots consulted during ``forward``."""

    site_transforms: dict[str, list[SiteTransform]] = field(default_factory=dict)
    kv_prefix: Optional[PrefixSupplier] = None
    embed_prepend: Optional[PrependSupplier] = None

    def add_transform(self, site: str, fn: SiteTransform) -> None:
        self.site_transforms.setdefault(site, []).append(fn)

    def remove_transform(self, site: str, fn: SiteTransform) -> None:
        transforms = self.site_transforms.get(site, [])
        if fn in transforms:
            transforms.remove(fn)
        if not transforms:
            self.site_transforms.pop(site, None)

    def apply(self, site: str, inp: nc.Tensor, out: nc.Tensor) -> nc.Tensor:
        for fn in self.site_transforms.get(site, ()):
            out = fn(inp, out)
        return out

    def is_empty(self) -> bool:
        return not self.site_transforms and self.kv_prefix is None and self.embed_prepend is None


class TransformerModel:
    """
    Named-parameter tree plus hook table.

    Parameter names are dotted paths (``layers.1.attn.q.weight``); the name
    set is a pure function of the spec. Tuners add their own tensors to
    ``params`` under their method prefix.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: dict[str, nc.Tensor] = {}
        self.hooks = HookTable()
        self.base_names: frozenset[str] = frozenset()
        self.active_handle = None

    # ------------------------------------------------------------------
    # parameter access
    # ------------------------------------------------------------------

    def __getitem__(self, name: str) -> nc.Tensor:
        return self.params[name]

    def named_parameters(self, trainable_only: bool = False):
        for name, tensor in self.params.items():
            if trainable_only and not tensor.requires_grad:
                continue
            yield name, tensor

    def linear_sites(self) -> list[str]:
        """Names of every base linear layer (weight name without ``.weight``)."""
        return [name[: -len(".weight")] for name in self.params
                if name in self.base_names and name.endswith(".weight")
                and f"{name[:-len('.weight')]}.bias" in self.params]

    def snapshot(self, names: Optional[Sequence[str]] = None) -> dict[str, np.ndarray]:
        names = list(self.params) if names is None else names
        return {name: self.params[name].data.copy() for name in names}

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _linear(self, hooks: HookTable, site: str, x: nc.Tensor) -> nc.Tensor:
        weight = self.params[f"{site}.weight"]
        bias = self.params[f"{site}.bias"]
        out = nc.add(nc.matmul(x, nc.transpose(weight)), bias)
        return hooks.apply(site, x, out)

    def forward(self, tokens: Sequence[int], hooks: Optional[HookTable] = None) -> nc.Tensor:
        """
        Logits over the vocabulary at each position (T'×V).

        T' equals len(tokens) plus the number of prepended virtual tokens.

        Raises:
            DataError: token id outside the vocabulary
            LengthError: total length exceeds max_seq
        """
        spec = self.spec
        hooks = self.hooks if hooks is None else hooks
        ids = [int(t) for t in tokens]
        bad = [t for t in ids if t < 0 or t >= spec.vocab_size]
        if bad:
            raise DataError(f"token ids outside vocabulary of size {spec.vocab_size}: {bad}")

        x = nc.embedding(self.params["tok_emb.weight"], ids)
        if hooks.embed_prepend is not None:
            x = nc.concat([hooks.embed_prepend(), x])
        total = x.shape[0]
        if total > spec.max_seq:
            raise LengthError(
                f"sequence of {total} positions exceeds max_seq {spec.max_seq}"
            )
        x = nc.add(x, nc.embedding(self.params["pos_emb.weight"], range(total)))

        for i in range(spec.n_layers):
            base = f"layers.{i}"
            h = nc.layer_norm(x, self.params[f"{base}.ln1.gamma"], self.params[f"{base}.ln1.beta"], spec.ln_eps)
            q = self._linear(hooks, f"{base}.attn.q", h)
            k = self._linear(hooks, f"{base}.attn.k", h)
            v = self._linear(hooks, f"{base}.attn.v", h)
            prefix = hooks.kv_prefix(i) if hooks.kv_prefix is not None else None
            if prefix is None:
                attn = nc.causal_attention(q, k, v, spec.n_heads)
            else:
                attn = nc.causal_attention(q, k, v, spec.n_heads, prefix[0], prefix[1])
            attn = self._linear(hooks, f"{base}.attn.o", attn)
            attn = hooks.apply(f"{base}.attn", h, attn)
            x = nc.add(x, attn)

            h = nc.layer_norm(x, self.params[f"{base}.ln2.gamma"], self.params[f"{base}.ln2.beta"], spec.ln_eps)
            up = self._linear(hooks, f"{base}.ff.up", h)
            act = hooks.apply(f"{base}.ff.act", up, nc.gelu(up))
            down = self._linear(hooks, f"{base}.ff.down", act)
            down = hooks.apply(f"{base}.ff", h, down)
            x = nc.add(x, down)

        x = nc.layer_norm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"], spec.ln_eps)
        if spec.tie_output_head:
            return nc.matmul(x, nc.transpose(self.params["tok_emb.weight"]))
        return nc.matmul(x, nc.transpose(self.params["head.weight"]))


# ============================================================================
# CONSTRUCTION & ACCOUNTING
# ============================================================================


def build_model(spec: ModelSpec, seed: int) -> TransformerModel:
    """
    Build a model with normal(0, 0.02) weights, unit gammas, zero betas/biases.

    Deterministic in ``seed``.

    Raises:
        ConfigError: invalid spec
    """
    spec.check()
    rng = np.random.default_rng(seed)
    model = TransformerModel(spec)
    d, ff = spec.d_model, spec.d_ff

    def normal(name: str, shape: tuple) -> None:
        model.params[name] = nc.Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)

    def const(name: str, shape: tuple, value: float) -> None:
        model.params[name] = nc.Tensor(np.full(shape, value), requires_grad=True, name=name)

    normal("tok_emb.weight", (spec.vocab_size, d))
    normal("pos_emb.weight", (spec.max_seq, d))
    for i in range(spec.n_layers):
        base = f"layers.{i}"
        const(f"{base}.ln1.gamma", (d,), 1.0)
        const(f"{base}.ln1.beta", (d,), 0.0)
        for proj in ("q", "k", "v", "o"):
            normal(f"{base}.attn.{proj}.weight", (d, d))
            const(f"{base}.attn.{proj}.bias", (d,), 0.0)
        const(f"{base}.ln2.gamma", (d,), 1.0)
        const(f"{base}.ln2.beta", (d,), 0.0)
        normal(f"{base}.ff.up.weight", (ff, d))
        const(f"{base}.ff.up.bias", (ff,), 0.0)
        normal(f"{base}.ff.down.weight", (d, ff))
        const(f"{base}.ff.down.bias", (d,), 0.0)
    const("ln_f.gamma", (d,), 1.0)
    const("ln_f.beta", (d,), 0.0)
    if not spec.tie_output_head:
        normal("head.weight", (spec.vocab_size, d))
    model.base_names = frozenset(model.params)

    logger.debug("Built model with %d parameters (seed=%d)", count_parameters(model), seed)
    return model


def forward(model: TransformerModel, tokens: Sequence[int], hooks: Optional[HookTable] = None) -> nc.Tensor:
    return model.forward(tokens, hooks)


def count_parameters(model: TransformerModel, trainable_only: bool = False) -> int:
    """Element count over (trainable) parameters, tuner tensors included."""
    return sum(t.size for _, t in model.named_parameters(trainable_only=trainable_only))


def detach(model: TransformerModel, handle) -> None:
    """
    Undo an attachment: remove hooks and injected tensors, unfreeze the base.

    ``handle`` is the attachment record returned by ``peft.attach``.
    """
    for record in reversed(handle.hooks):
        record.remove(model)
    for name in handle.injected:
        model.params.pop(name, None)
    for name in model.base_names:
        tensor = model.params[name]
        tensor.requires_grad = True
        tensor.zero_grad()
    model.active_handle = None
    logger.debug("Detached %s", handle.peft_type)
