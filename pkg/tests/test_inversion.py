"""Inversion recursion, memory bank contract, persistence round trips."""
import math

import numpy as np
import pytest
import torch

from dragedit.backend import Capture, DenoiseOutput, Latent
from dragedit.backend.toy import ToyBackend
from dragedit.errors import BankError, ContractError
from dragedit.inversion import (
    BankEntry,
    MemoryBank,
    inversion_step,
    invert,
    load_bank,
    lookup,
    read_manifest,
    read_tensor_blob,
    save_bank,
    write_tensor_blob,
)
from dragedit.sampler import ddim_step

from conftest import random_image


class ZeroNoiseBackend(ToyBackend):
    """Real capture plumbing, rigged eps = 0."""

    def predict(self, latent, t, text_cond=None, attn_override=None, capture=Capture.NONE):
        out = super().predict(latent, t, text_cond, attn_override, capture)
        return DenoiseOutput(
            noise_pred=torch.zeros_like(out.noise_pred),
            features=out.features,
            attention=out.attention,
        )


def test_inversion_and_ddim_are_algebraic_inverses(rng):
    # oracle: the two recursions are exact inverses given the same eps
    s = ToyBackend(seed=3)
    z = torch.from_numpy(rng.standard_normal((4, 16, 16)))
    eps = torch.from_numpy(rng.standard_normal((4, 16, 16)))
    for t in (1, 7, 25, 50):
        z_up = inversion_step(z, eps, t, s.alpha_bar)
        z_back = ddim_step(z_up, eps, t, s.alpha_bar)
        assert float((z_back - z).abs().max()) < 1e-10


def test_rigged_zero_noise_collapses_to_scale_chain(rng):
    backend = ZeroNoiseBackend(seed=5)
    z0 = backend.encode(random_image(rng))
    bank = invert(backend, z0, None, t_max=50, text_cond=None)
    abar = backend.alpha_bar
    # z_{t+1} = sqrt(abar_{t+1}/abar_t) z_t at every step
    prev = z0.data
    for t in range(1, 51):
        expect = math.sqrt(abar(t) / abar(t - 1)) * prev
        got = bank.lookup(t).z_gud.data
        assert float((got - expect).abs().max()) < 1e-12
        prev = got
    # final z_T = sqrt(abar_T) z_0
    zt = bank.z_T_gen.data
    assert float((zt - math.sqrt(abar(50)) * z0.data).abs().max()) < 1e-12


def test_bank_structure(backend, rng):
    z0 = backend.encode(random_image(rng))
    bank = invert(backend, z0, None, t_max=50, text_cond=backend.condition("x"))
    assert sorted(bank.entries) == list(range(1, 51))
    assert bank.t_max == 50
    assert not bank.has_reference
    assert torch.equal(bank.z_T_gen.data, bank.lookup(50).z_gud.data)
    tokens = backend.profile.tokens_per_site()
    for t in (1, 17, 50):
        entry = lookup(bank, t)
        assert entry.t == t
        for l in range(1, 5):
            assert entry.kv_gud.token_count(l) == tokens[l]


def test_lookup_range(backend, rng):
    z0 = backend.encode(random_image(rng))
    bank = invert(backend, z0, None, t_max=10, text_cond=None)
    with pytest.raises(ContractError):
        bank.lookup(0)
    with pytest.raises(ContractError):
        bank.lookup(11)


def test_inversion_deterministic(backend, rng):
    z0 = backend.encode(random_image(rng))
    cond = backend.condition("same text")
    a = invert(backend, z0, None, t_max=12, text_cond=cond)
    b = invert(backend, z0, None, t_max=12, text_cond=cond)
    for t in range(1, 13):
        assert torch.equal(a.lookup(t).z_gud.data, b.lookup(t).z_gud.data)
        for l in range(1, 5):
            assert torch.equal(a.lookup(t).kv_gud.sites[l][0], b.lookup(t).kv_gud.sites[l][0])


def test_reference_stream_symmetry(backend, rng):
    z0 = backend.encode(random_image(rng))
    z0r = backend.encode(random_image(rng))
    bank = invert(backend, z0, z0r, t_max=8, text_cond=None)
    assert bank.has_reference
    for t in range(1, 9):
        e = bank.lookup(t)
        assert e.z_ref is not None and e.kv_ref is not None
        for l in range(1, 5):
            assert e.kv_ref.token_count(l) == e.kv_gud.token_count(l)


def test_invert_rejects_shape_mismatch(backend, rng):
    z0 = backend.encode(random_image(rng))
    small = Latent(torch.zeros(4, 8, 8, dtype=torch.float64))
    with pytest.raises(ContractError):
        invert(backend, z0, small, t_max=5, text_cond=None)


def test_entry_requires_both_reference_fields(backend, rng):
    z0 = backend.encode(random_image(rng))
    out = backend.predict(z0, 1, capture=Capture.KV)
    with pytest.raises(ContractError):
        BankEntry(t=1, z_gud=z0, kv_gud=out.attention, z_ref=z0, kv_ref=None)


def test_bank_requires_uniform_reference(backend, rng):
    z0 = backend.encode(random_image(rng))
    kv = backend.predict(z0, 1, capture=Capture.KV).attention
    mixed = {
        1: BankEntry(t=1, z_gud=z0, kv_gud=kv),
        2: BankEntry(t=2, z_gud=z0, kv_gud=kv, z_ref=z0, kv_ref=kv),
    }
    with pytest.raises(ContractError):
        MemoryBank(entries=mixed, t_max=2, profile_hash="x")


def test_tensor_blob_round_trip(tmp_path, rng):
    tensors = {
        "a.f64": torch.from_numpy(rng.standard_normal((4, 3, 2))),
        "b.f32": torch.from_numpy(rng.standard_normal(7).astype(np.float32)),
        "scalarish": torch.from_numpy(rng.standard_normal((1,))),
    }
    path = tmp_path / "blob.bin"
    write_tensor_blob(path, tensors)
    back = read_tensor_blob(path)
    assert set(back) == set(tensors)
    for name, t in tensors.items():
        assert back[name].dtype == t.dtype
        assert torch.equal(back[name], t)


def test_tensor_blob_truncation_detected(tmp_path, rng):
    path = tmp_path / "blob.bin"
    write_tensor_blob(path, {"x": torch.from_numpy(rng.standard_normal((8, 8)))})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(BankError):
        read_tensor_blob(path)


def test_bank_save_load_bitwise(tmp_path, backend, rng):
    z0 = backend.encode(random_image(rng))
    z0r = backend.encode(random_image(rng))
    bank = invert(backend, z0, z0r, t_max=6, text_cond=backend.condition("p"))
    save_bank(bank, tmp_path / "bank", extras={"prompt": "p"})
    loaded = load_bank(tmp_path / "bank")
    assert loaded.t_max == 6
    assert loaded.profile_hash == bank.profile_hash
    for t in range(1, 7):
        a, b = bank.lookup(t), loaded.lookup(t)
        assert torch.equal(a.z_gud.data, b.z_gud.data)
        assert torch.equal(a.z_ref.data, b.z_ref.data)
        for l in range(1, 5):
            assert torch.equal(a.kv_gud.sites[l][0], b.kv_gud.sites[l][0])
            assert torch.equal(a.kv_gud.sites[l][1], b.kv_gud.sites[l][1])
            assert torch.equal(a.kv_ref.sites[l][0], b.kv_ref.sites[l][0])


def test_manifest_contents(tmp_path, backend, rng):
    z0 = backend.encode(random_image(rng))
    bank = invert(backend, z0, None, t_max=4, text_cond=None)
    save_bank(bank, tmp_path / "b", extras={"prompt": "hello"})
    man = read_manifest(tmp_path / "b")
    assert man["v"] == 1
    assert man["t_max"] == 4
    assert man["has_reference"] is False
    assert man["profile_hash"] == backend.profile.content_hash()
    assert man["prompt"] == "hello"
    assert len(man["files"]) == 4


def test_extras_cannot_shadow_structure(tmp_path, backend, rng):
    z0 = backend.encode(random_image(rng))
    bank = invert(backend, z0, None, t_max=3, text_cond=None)
    with pytest.raises(BankError):
        save_bank(bank, tmp_path / "b", extras={"t_max": 99})


def test_load_checks_profile_hash(tmp_path, backend, rng):
    z0 = backend.encode(random_image(rng))
    bank = invert(backend, z0, None, t_max=3, text_cond=None)
    save_bank(bank, tmp_path / "b")
    with pytest.raises(BankError):
        load_bank(tmp_path / "b", expected_profile_hash="deadbeef00000000")


def test_invert_validates_t_max(backend, rng):
    z0 = backend.encode(random_image(rng))
    with pytest.raises(ContractError):
        invert(backend, z0, None, t_max=0, text_cond=None)
    with pytest.raises(ContractError):
        invert(backend, z0, None, t_max=99, text_cond=None)
