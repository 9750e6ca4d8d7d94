"""Guided DDIM loop: CFG, update rule, gate, previews, cancellation."""
import json
import math

import numpy as np
import pytest
import torch

from dragedit.backend import Capture, DenoiseOutput, Latent
from dragedit.backend.toy import ToyBackend
from dragedit.config import GuidanceConfig, config_for_task
from dragedit.errors import ContractError
from dragedit.inversion import invert
from dragedit.sampler import cfg_noise, ddim_step, predicted_x0, run

from conftest import block_mask, random_image
from dragedit.tasks import build_moving


class RiggedCfgBackend(ToyBackend):
    """cond pass returns c1, uncond pass returns c0."""

    def __init__(self, c0, c1, **kw):
        super().__init__(**kw)
        self.c0, self.c1 = c0, c1

    def predict(self, latent, t, text_cond=None, attn_override=None, capture=Capture.NONE):
        value = self.c0 if text_cond is None else self.c1
        return DenoiseOutput(noise_pred=torch.full_like(latent.data, value))


def test_cfg_scale_one_is_conditional_pass(backend, rng):
    z = backend.encode(random_image(rng))
    cond = backend.condition("anything")
    eps = cfg_noise(backend, z, 5, cond, None, 1.0)
    expect = backend.predict(z, 5, text_cond=cond).noise_pred
    assert torch.equal(eps, expect)


def test_cfg_equal_passes_collapse_for_any_scale(rng):
    b = RiggedCfgBackend(0.37, 0.37)
    z = Latent(torch.zeros(4, 16, 16, dtype=torch.float64))
    for scale in (1.0, 3.0, 9.0):
        eps = cfg_noise(b, z, 5, "txt", None, scale)
        assert float((eps - 0.37).abs().max()) < 1e-15


def test_cfg_affine_identity(rng):
    b = RiggedCfgBackend(0.1, 0.3)
    z = Latent(torch.zeros(4, 16, 16, dtype=torch.float64))
    eps = cfg_noise(b, z, 5, "txt", None, 5.0)
    assert float((eps - (0.1 + 5.0 * (0.3 - 0.1))).abs().max()) < 1e-12


def test_cfg_rejects_scale_below_one(backend, rng):
    z = backend.encode(random_image(rng))
    with pytest.raises(ContractError):
        cfg_noise(backend, z, 5, None, None, 0.5)


def test_ddim_zero_noise_is_pure_rescaling(backend, rng):
    z = torch.from_numpy(rng.standard_normal((4, 16, 16)))
    eps = torch.zeros_like(z)
    for t in (1, 20, 50):
        out = ddim_step(z, eps, t, backend.alpha_bar)
        expect = math.sqrt(backend.alpha_bar(t - 1) / backend.alpha_bar(t)) * z
        assert float((out - expect).abs().max()) < 1e-12


def test_ddim_degenerate_schedule_step_is_identity(rng):
    z = torch.from_numpy(rng.standard_normal((4, 8, 8)))
    eps = torch.from_numpy(rng.standard_normal((4, 8, 8)))
    flat = lambda t: 0.9  # abar_{t-1} == abar_t
    out = ddim_step(z, eps, 3, flat)
    assert float((out - z).abs().max()) < 1e-12


def test_ddim_rejects_t_zero(rng):
    z = torch.zeros(4, 8, 8, dtype=torch.float64)
    with pytest.raises(ContractError):
        ddim_step(z, z, 0, lambda t: 1.0)


def test_predicted_x0_at_final_step_equals_ddim_output(backend, rng):
    # abar_0 = 1 makes the t=1 update exactly the predicted clean latent
    z = torch.from_numpy(rng.standard_normal((4, 16, 16)))
    eps = torch.from_numpy(rng.standard_normal((4, 16, 16)))
    x0 = predicted_x0(z, eps, 1, backend.alpha_bar)
    z0 = ddim_step(z, eps, 1, backend.alpha_bar)
    assert float((z0 - x0).abs().max()) < 1e-12


def _recon_setup(backend, rng, t_max=50):
    z0 = backend.encode(random_image(rng))
    cond = backend.condition("recon")
    bank = invert(backend, z0, None, t_max=t_max, text_cond=cond)
    cfg = config_for_task("reconstruct", {"steps": t_max, "cfg_scale": 1.0})
    return z0, cond, bank, cfg


def test_identity_edit_reconstructs(backend, rng):
    z0, cond, bank, cfg = _recon_setup(backend, rng)
    result, state = run(backend, bank, None, cfg, text_cond=cond)
    assert float((result.data - z0.data).abs().max()) < 1e-3
    img = backend.decode(result)
    original = backend.decode(z0)
    assert float((img - original).abs().max()) < 1e-3
    assert state.gradient_calls == 0


def test_run_is_deterministic(backend, rng):
    z0, cond, bank, _ = _recon_setup(backend, rng, t_max=20)
    spec = build_moving(block_mask(16, 16, 4, 8, 3, 7), offset=(5, 4))
    cfg = config_for_task("moving", {"steps": 20})
    a, _ = run(backend, bank, spec, cfg, text_cond=cond)
    b, _ = run(backend, bank, spec, cfg, text_cond=cond)
    assert torch.equal(a.data, b.data)


def test_gate_exact_counts(backend, rng):
    _, cond, bank, _ = _recon_setup(backend, rng, t_max=12)
    calls = []

    def probe(z, t, entry):
        calls.append(t)
        return torch.zeros_like(z.data), None

    for n in (0, 1, 5, 12):
        calls.clear()
        cfg = GuidanceConfig(steps=12, n_gated=n, cfg_scale=1.0, eta=0.0)
        _, state = run(backend, bank, None, cfg, text_cond=cond, gradient_fn=probe)
        assert state.gradient_calls == n
        assert len(calls) == n
        # gate opens at the start of sampling: t = T, T-1, ...
        assert calls == list(range(12, 12 - n, -1))


def test_gate_never_calls_when_n_zero(backend, rng):
    _, cond, bank, _ = _recon_setup(backend, rng, t_max=8)

    def bomb(z, t, entry):
        raise AssertionError("gate should stay closed")

    cfg = GuidanceConfig(steps=8, n_gated=0, cfg_scale=1.0)
    run(backend, bank, None, cfg, text_cond=cond, gradient_fn=bomb)


def test_records_one_per_step_with_timings(backend, rng):
    _, cond, bank, cfg = _recon_setup(backend, rng, t_max=9)
    cfg = config_for_task("reconstruct", {"steps": 9, "cfg_scale": 1.0})
    _, state = run(backend, bank, None, cfg, text_cond=cond)
    assert [r.t for r in state.records] == list(range(9, 0, -1))
    assert all(r.seconds >= 0 for r in state.records)
    lines = state.to_jsonl().strip().splitlines()
    assert len(lines) == 9
    assert json.loads(lines[0])["t"] == 9


def test_preview_cadence(backend, rng):
    _, cond, bank, _ = _recon_setup(backend, rng, t_max=7)
    cfg = GuidanceConfig(steps=7, n_gated=0, cfg_scale=1.0, preview_every=3)
    _, state = run(backend, bank, None, cfg, text_cond=cond)
    # steps_done 3 and 6, plus the forced final frame at t=1
    previewed = [r.t for r in state.records if r.preview]
    assert previewed == [5, 2, 1]
    assert len(state.previews) == 3


def test_eta_schedule_hook(backend, rng):
    _, cond, bank, _ = _recon_setup(backend, rng, t_max=6)
    pull = torch.ones(4, 16, 16, dtype=torch.float64)

    def gradient_fn(z, t, entry):
        return pull, None

    base_cfg = GuidanceConfig(steps=6, n_gated=6, cfg_scale=1.0, eta=0.5)
    a, _ = run(backend, bank, None, base_cfg, text_cond=cond, gradient_fn=gradient_fn,
               eta_schedule=lambda i, t: 2.0)
    doubled_cfg = GuidanceConfig(steps=6, n_gated=6, cfg_scale=1.0, eta=1.0)
    b, _ = run(backend, bank, None, doubled_cfg, text_cond=cond, gradient_fn=gradient_fn)
    assert float((a.data - b.data).abs().max()) < 1e-12


def test_cancel_stops_early(backend, rng):
    _, cond, bank, cfg = _recon_setup(backend, rng, t_max=10)
    cfg = config_for_task("reconstruct", {"steps": 10, "cfg_scale": 1.0})
    seen = []

    def cancel():
        return len(seen) >= 4

    _, state = run(backend, bank, None, cfg, text_cond=cond,
                   step_callback=lambda r, p: seen.append(r.t), cancel_check=cancel)
    assert state.cancelled
    assert len(state.records) == 4


def test_run_rejects_step_mismatch(backend, rng):
    _, cond, bank, _ = _recon_setup(backend, rng, t_max=10)
    cfg = GuidanceConfig(steps=9, n_gated=0, cfg_scale=1.0)
    with pytest.raises(ContractError):
        run(backend, bank, None, cfg, text_cond=cond)


def test_run_rejects_foreign_bank(backend, rng):
    other = ToyBackend(seed=99, heads=1)
    z0 = other.encode(random_image(rng))
    bank = invert(other, z0, None, t_max=5, text_cond=None)
    cfg = GuidanceConfig(steps=5, n_gated=0, cfg_scale=1.0)
    with pytest.raises(ContractError):
        run(backend, bank, None, cfg)


def test_step_callback_gets_preview_frames(backend, rng):
    _, cond, bank, _ = _recon_setup(backend, rng, t_max=5)
    cfg = GuidanceConfig(steps=5, n_gated=0, cfg_scale=1.0, preview_every=2)
    frames = []
    run(backend, bank, None, cfg, text_cond=cond,
        step_callback=lambda r, p: frames.append((r.preview, p is not None)))
    for preview_flag, has_frame in frames:
        assert preview_flag == has_frame
