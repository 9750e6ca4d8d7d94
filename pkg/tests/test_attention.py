"""KV substitution plans and the attention primitive."""
import numpy as np
import pytest
import torch

from dragedit.attention import attend, build_kv_plan
from dragedit.backend import AttentionRecord, Capture
from dragedit.backend.toy import ToyBackend
from dragedit.errors import ContractError
from dragedit.inversion import invert

from conftest import random_image


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_attend_single_token_returns_that_row(rng):
    q = torch.from_numpy(rng.standard_normal((1, 5, 4)))
    k = torch.from_numpy(rng.standard_normal((1, 1, 4)))
    v = torch.from_numpy(rng.standard_normal((1, 1, 4)))
    out = attend(q, k, v)
    assert float((out - v.expand(1, 5, 4)).abs().max()) < 1e-12


def test_attend_uniform_scores_returns_mean(rng):
    q = torch.zeros(1, 3, 4, dtype=torch.float64)
    k = torch.from_numpy(rng.standard_normal((1, 9, 4)))
    v = torch.from_numpy(rng.standard_normal((1, 9, 4)))
    out = attend(q, k, v)
    expect = v.mean(dim=1, keepdim=True).expand(1, 3, 4)
    assert float((out - expect).abs().max()) < 1e-12


def test_attend_matches_numpy_oracle(rng):
    q = torch.from_numpy(rng.standard_normal((2, 6, 8)))
    k = torch.from_numpy(rng.standard_normal((2, 10, 8)))
    v = torch.from_numpy(rng.standard_normal((2, 10, 8)))
    out = attend(q, k, v).numpy()
    for h in range(2):
        w = np_softmax(q.numpy()[h] @ k.numpy()[h].T / np.sqrt(8))
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-6
        assert np.abs(out[h] - w @ v.numpy()[h]).max() < 1e-10


def test_attend_rejects_dim_mismatch(rng):
    q = torch.zeros(1, 3, 4, dtype=torch.float64)
    k = torch.zeros(1, 5, 6, dtype=torch.float64)
    with pytest.raises(ContractError):
        attend(q, k, k)


def _bank(backend, rng, with_ref):
    z0 = backend.encode(random_image(rng))
    z0r = backend.encode(random_image(rng)) if with_ref else None
    return invert(backend, z0, z0r, t_max=5, text_cond=None)


def test_plan_single_image_tasks_use_gud_only(backend, rng):
    entry = _bank(backend, rng, with_ref=False).lookup(3)
    tokens = backend.profile.tokens_per_site()
    for kind in ("moving", "resizing", "dragging", "reconstruct"):
        plan = build_kv_plan(entry, kind)
        assert plan.mode == "gud_only"
        for l in range(1, 5):
            assert plan.record.token_count(l) == tokens[l]


def test_plan_reference_tasks_concat_doubles_tokens(backend, rng):
    entry = _bank(backend, rng, with_ref=True).lookup(3)
    tokens = backend.profile.tokens_per_site()
    for kind in ("replacing", "pasting"):
        plan = build_kv_plan(entry, kind)
        assert plan.mode == "gud_concat_ref"
        for l in range(1, 5):
            assert plan.record.token_count(l) == 2 * tokens[l]


def test_plan_dragging_ignores_available_reference(backend, rng):
    entry = _bank(backend, rng, with_ref=True).lookup(2)
    plan = build_kv_plan(entry, "dragging")
    assert plan.mode == "gud_only"
    assert plan.record.token_count(1) == backend.profile.tokens_per_site()[1]


def test_plan_requires_reference_when_task_needs_it(backend, rng):
    entry = _bank(backend, rng, with_ref=False).lookup(2)
    with pytest.raises(ContractError):
        build_kv_plan(entry, "pasting")


def test_plan_rejects_unknown_kind(backend, rng):
    entry = _bank(backend, rng, with_ref=False).lookup(1)
    with pytest.raises(ContractError):
        build_kv_plan(entry, "sharpening")


def test_self_substitution_is_identity(backend, rng):
    z = backend.encode(random_image(rng))
    out = backend.predict(z, 9, capture=Capture.KV)
    again = backend.predict(z, 9, attn_override=out.attention)
    assert float((again.noise_pred - out.noise_pred).abs().max()) < 1e-6


def test_concat_override_keeps_output_shape(backend, rng):
    z = backend.encode(random_image(rng))
    rec = backend.predict(z, 9, capture=Capture.KV).attention
    doubled = AttentionRecord(
        {l: (torch.cat([k, k], dim=1), torch.cat([v, v], dim=1)) for l, (k, v) in rec.sites.items()}
    )
    out = backend.predict(z, 9, attn_override=doubled)
    assert out.noise_pred.shape == z.data.shape
    # duplicated tokens leave softmax-weighted averages unchanged
    base = backend.predict(z, 9).noise_pred
    assert float((out.noise_pred - base).abs().max()) < 1e-10


def test_substitution_leaves_pre_attention_path_untouched(rng):
    # deepest decoder block's pre-attention features depend only on the
    # encoder path, so zeroed-KV substitution cannot change them
    backend = ToyBackend(seed=11, feature_site="pre_attn")
    z = backend.encode(random_image(rng))
    rec = backend.predict(z, 6, capture=Capture.KV).attention
    zeroed = AttentionRecord(
        {l: (torch.zeros_like(k), torch.zeros_like(v)) for l, (k, v) in rec.sites.items()}
    )
    plain = backend.predict(z, 6, capture=Capture.FEATURES)
    overridden = backend.predict(z, 6, attn_override=zeroed, capture=Capture.FEATURES)
    assert torch.equal(plain.features.layer(1), overridden.features.layer(1))
    assert not torch.equal(plain.noise_pred, overridden.noise_pred)
