import numpy as np
import pytest

from peftlab.core import numcore as nc
from peftlab.core.errors import ConfigError, DataError, LengthError
from peftlab.core.model import (
    REFERENCE_SPEC,
    HookTable,
    ModelSpec,
    build_model,
    count_parameters,
    spec_fingerprint,
)


def test_reference_parameter_count(model):
    assert count_parameters(model) == 8640
    assert count_parameters(model, trainable_only=True) == 8640


def test_build_is_deterministic_in_seed():
    a, b, c = build_model(REFERENCE_SPEC, 5), build_model(REFERENCE_SPEC, 5), build_model(REFERENCE_SPEC, 6)
    assert list(a.params) == list(b.params)
    for name in a.params:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["tok_emb.weight"].data, c["tok_emb.weight"].data)


def test_initialization_constants(model):
    np.testing.assert_array_equal(model["layers.0.ln1.gamma"].data, np.ones(16))
    np.testing.assert_array_equal(model["layers.1.ff.up.bias"].data, np.zeros(64))
    assert abs(model["layers.0.attn.q.weight"].data.std() - 0.02) < 0.01


def test_heads_must_divide_width():
    with pytest.raises(ConfigError, match="divisible"):
        build_model(ModelSpec(n_heads=3), seed=0)


def test_untied_head_adds_output_matrix():
    untied = build_model(ModelSpec(tie_output_head=False), seed=0)
    assert count_parameters(untied) == 8640 + 64 * 16
    assert untied.forward([1, 5, 9]).shape == (3, 64)


def test_linear_sites(model):
    sites = model.linear_sites()
    assert len(sites) == 12
    assert "layers.1.ff.down" in sites


def test_forward_shape(model):
    assert model.forward([1, 4, 7, 3]).shape == (4, 64)


def test_forward_rejects_out_of_vocab(model):
    with pytest.raises(DataError):
        model.forward([1, 64])


def test_forward_rejects_overflow(model):
    with pytest.raises(LengthError):
        model.forward([5] * 65)


def test_prepended_virtual_tokens_extend_output(model):
    block = nc.Tensor(np.zeros((8, 16)))
    hooks = HookTable(embed_prepend=lambda: block)
    assert model.forward([1, 2, 3], hooks).shape == (11, 64)
    with pytest.raises(LengthError):
        model.forward([5] * 57, hooks)


def test_kv_prefix_keeps_output_length(model):
    rows = nc.Tensor(np.ones((4, 16)))
    hooks = HookTable(kv_prefix=lambda layer: (rows, rows))
    logits = model.forward([1, 2, 3], hooks)
    assert logits.shape == (3, 64)
    assert not np.allclose(logits.data, model.forward([1, 2, 3]).data)


def test_forward_is_causal(model):
    a = model.forward([1, 10, 20, 30]).data
    b = model.forward([1, 10, 21, 40]).data
    np.testing.assert_allclose(a[:2], b[:2], rtol=0, atol=1e-14)


def test_spec_fingerprint_tracks_fields():
    assert spec_fingerprint(REFERENCE_SPEC) == spec_fingerprint(ModelSpec())
    assert spec_fingerprint(REFERENCE_SPEC) != spec_fingerprint(ModelSpec(d_model=32))


def perturbed_model(seed: int = 3):
    """Reference model with every parameter redrawn at unit scale."""
    model = build_model(REFERENCE_SPEC, seed=0)
    rng = np.random.default_rng(seed)
    for tensor in model.params.values():
        tensor.data[...] = rng.normal(0.0, 0.5, size=tensor.shape)
    return model


def reference_forward(model, x: np.ndarray) -> np.ndarray:
    """Plain numpy decoder over already-embedded inputs (positions added here)."""
    p = {name: t.data for name, t in model.params.items()}
    spec = model.spec
    seq = x.shape[0]
    head_dim = spec.d_model // spec.n_heads
    mask = np.tril(np.ones((seq, seq), dtype=bool))

    def ln(a, prefix):
        centered = a - a.mean(axis=-1, keepdims=True)
        var = (centered ** 2).mean(axis=-1, keepdims=True)
        return centered / np.sqrt(var + spec.ln_eps) * p[f"{prefix}.gamma"] + p[f"{prefix}.beta"]

    def linear(a, site):
        return a @ p[f"{site}.weight"].T + p[f"{site}.bias"]

    def gelu(a):
        return 0.5 * a * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (a + 0.044715 * a ** 3)))

    x = x + p["pos_emb.weight"][:seq]
    for i in range(spec.n_layers):
        base = f"layers.{i}"
        h = ln(x, f"{base}.ln1")
        q, k, v = (linear(h, f"{base}.attn.{name}") for name in "qkv")
        heads = []
        for j in range(spec.n_heads):
            cols = slice(j * head_dim, (j + 1) * head_dim)
            scores = np.where(mask, q[:, cols] @ k[:, cols].T / np.sqrt(head_dim), -np.inf)
            weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
            heads.append(weights / weights.sum(axis=-1, keepdims=True) @ v[:, cols])
        x = x + linear(np.concatenate(heads, axis=1), f"{base}.attn.o")
        h = ln(x, f"{base}.ln2")
        x = x + linear(gelu(linear(h, f"{base}.ff.up")), f"{base}.ff.down")
    return ln(x, "ln_f") @ p["tok_emb.weight"].T


class TestHookNeutrality:
    def test_matches_plain_numpy_decoder(self):
        model = perturbed_model()
        ids = [1, 7, 12, 30, 3]
        expected = reference_forward(model, model["tok_emb.weight"].data[ids])
        np.testing.assert_allclose(model.forward(ids).data, expected, rtol=0, atol=1e-10)

    def test_prepended_rows_shift_positions(self):
        model = perturbed_model()
        ids = [1, 7, 12, 3]
        block = np.random.default_rng(9).normal(size=(5, 16))
        hooks = HookTable(embed_prepend=lambda: nc.Tensor(block))
        expected = reference_forward(model, np.concatenate([block, model["tok_emb.weight"].data[ids]]))
        np.testing.assert_allclose(model.forward(ids, hooks).data, expected, rtol=0, atol=1e-10)

    def test_prepended_vocab_rows_equal_longer_input(self):
        model = perturbed_model()
        prefix_ids, ids = [40, 41, 42], [1, 7, 12, 3]
        hooks = HookTable(embed_prepend=lambda: nc.embedding(model["tok_emb.weight"], prefix_ids))
        np.testing.assert_array_equal(model.forward(ids, hooks).data, model.forward(prefix_ids + ids).data)

    def test_empty_table_is_neutral(self):
        model = perturbed_model()
        model.hooks = HookTable(embed_prepend=lambda: nc.Tensor(np.zeros((2, 16))))
        ids = [1, 7, 12, 3]
        expected = reference_forward(model, model["tok_emb.weight"].data[ids])
        np.testing.assert_allclose(model.forward(ids, HookTable()).data, expected, rtol=0, atol=1e-10)

    def test_identity_transforms_are_bit_neutral(self):
        model = perturbed_model()
        ids = [1, 7, 12, 30, 3]
        hooks = HookTable()
        sites = model.linear_sites()
        sites += [f"layers.{i}.{sub}" for i in range(REFERENCE_SPEC.n_layers) for sub in ("attn", "ff", "ff.act")]
        for site in sites:
            hooks.add_transform(site, lambda inp, out: out)
        assert len(hooks.site_transforms) == len(model.linear_sites()) + 6
        np.testing.assert_array_equal(model.forward(ids, hooks).data, model.forward(ids, HookTable()).data)
