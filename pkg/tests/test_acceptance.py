"""Acceptance gate: the contract-level checks for the editing engine.

Each test covers one headline criterion at its stated tolerance and prints a
single PASS line with the measured numbers (visible with -s or -rP).
"""
import json
import math
import os
import time

import numpy as np
import pytest
import torch

from dragedit.attention import attend, build_kv_plan
from dragedit.backend import Latent
from dragedit.config import GuidanceConfig, config_for_task, make_backend
from dragedit.evaluation import evaluate
from dragedit.guidance import (
    energy_edit,
    energy_for_latent,
    guidance_gradient,
    guided_features,
)
from dragedit.inversion import invert
from dragedit.masks import Mask
from dragedit.sampler import run
from dragedit.tasks import (
    DragPointSet,
    build_dragging,
    build_moving,
    build_pasting,
    build_replacing,
    build_resizing,
    materialize_layers,
)

from conftest import block_mask, random_image

pytestmark = pytest.mark.acceptance

GRID = 16


def _random_block(rng, max_side=5, h=GRID, w=GRID):
    bh = int(rng.integers(2, max_side + 1))
    bw = int(rng.integers(2, max_side + 1))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return block_mask(h, w, y0, y0 + bh, x0, x0 + bw)


def _random_offset_for(mask, rng, h=GRID, w=GRID):
    ys, xs = np.nonzero(mask.data)
    lo_dy, hi_dy = -ys.min(), (h - 1) - ys.max()
    lo_dx, hi_dx = -xs.min(), (w - 1) - xs.max()
    while True:
        dy = int(rng.integers(lo_dy, hi_dy + 1))
        dx = int(rng.integers(lo_dx, hi_dx + 1))
        if (dy, dx) != (0, 0):
            return dy, dx


def _random_spec(kind, rng):
    if kind == "moving":
        mask = _random_block(rng)
        return build_moving(mask, _random_offset_for(mask, rng))
    if kind == "resizing":
        if rng.integers(0, 2):
            side = int(rng.integers(2, 4))
            y0 = int(rng.integers(4, 9))
            x0 = int(rng.integers(4, 9))
            mask = block_mask(GRID, GRID, y0, y0 + side, x0, x0 + side)
            return build_resizing(mask, 2.0)
        mask = _random_block(rng, max_side=6)
        return build_resizing(mask, 0.5)
    if kind == "replacing":
        return build_replacing(_random_block(rng), _random_block(rng))
    if kind == "pasting":
        bh = int(rng.integers(2, 5))
        bw = int(rng.integers(2, 5))
        y0, x0 = int(rng.integers(0, GRID - bh)), int(rng.integers(0, GRID - bw))
        y1, x1 = int(rng.integers(0, GRID - bh)), int(rng.integers(0, GRID - bw))
        return build_pasting(
            block_mask(GRID, GRID, y0, y0 + bh, x0, x0 + bw),
            block_mask(GRID, GRID, y1, y1 + bh, x1, x1 + bw),
        )
    if kind == "dragging":
        n_points = int(rng.integers(1, 3))
        pairs = []
        patch = np.zeros((GRID, GRID), dtype=bool)
        for _ in range(n_points):
            sy, sx = int(rng.integers(3, 13)), int(rng.integers(3, 13))
            dy, dx = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
            ty, tx = min(max(sy + dy, 3), 12), min(max(sx + dx, 3), 12)
            pairs.append(((sy, sx), (ty, tx)))
            for cy, cx in ((sy, sx), (ty, tx)):
                patch[cy - 1 : cy + 2, cx - 1 : cx + 2] = True
        m_share = Mask(~patch)
        return build_dragging(DragPointSet(tuple(pairs), m_share))
    raise AssertionError(kind)


@pytest.fixture(scope="module")
def banks(backend):
    """One T=50 bank without and one with a reference image."""
    rng = np.random.default_rng(2024)
    cond = backend.condition("acceptance")
    z0 = backend.encode(random_image(rng))
    z0_ref = backend.encode(random_image(rng))
    plain = invert(backend, z0, None, t_max=50, text_cond=cond)
    with_ref = invert(backend, z0, z0_ref, t_max=50, text_cond=cond)
    return {"plain": plain, "ref": with_ref, "cond": cond, "z0": z0}


def test_gradient_matches_finite_differences(backend, banks):
    """Analytic energy gradients vs. central finite differences, all tasks."""
    started = time.monotonic()
    rng = np.random.default_rng(7)
    eps = 1e-4
    worst = 0.0
    checked = 0
    for kind in ("moving", "resizing", "replacing", "pasting", "dragging"):
        bank = banks["ref"] if kind in ("replacing", "pasting") else banks["plain"]
        cond = banks["cond"]
        cfg = config_for_task(kind, {"steps": 50})
        for _ in range(20):
            spec = _random_spec(kind, rng)
            t = int(rng.integers(21, 51))
            entry = bank.lookup(t)
            z = Latent(
                entry.z_gud.data + 0.3 * torch.from_numpy(rng.standard_normal(entry.z_gud.data.shape))
            )
            geometry = materialize_layers(spec, backend.profile, cfg.layers)
            guided = guided_features(backend, entry, cond)
            grad, _ = guidance_gradient(
                z, entry, spec, cfg, backend, text_cond=cond, geometry=geometry, guided=guided
            )
            for _ in range(3):
                u = torch.from_numpy(rng.standard_normal(z.data.shape))
                u = u / u.norm()
                up, _ = energy_for_latent(
                    z.data + eps * u, t, spec, cfg, backend, guided, geometry, cond
                )
                dn, _ = energy_for_latent(
                    z.data - eps * u, t, spec, cfg, backend, guided, geometry, cond
                )
                fd = float((up - dn) / (2 * eps))
                analytic = float((grad * u).sum())
                rel = abs(analytic - fd) / max(abs(fd), 1e-12)
                worst = max(worst, rel)
                checked += 1
                assert rel < 1e-4, f"{kind}: rel err {rel:.3e} (analytic {analytic}, fd {fd})"
    elapsed = time.monotonic() - started
    assert elapsed < 120, f"gradient check took {elapsed:.1f}s, budget is 120s"
    print(
        f"PASS gradient-vs-finite-differences: {checked} directional probes across 5 task "
        f"kinds, worst rel err {worst:.2e} < 1e-4, {elapsed:.1f}s"
    )


def test_reconstruction_round_trip(backend):
    """Invert then replay with no edit: the latent must come back."""
    started = time.monotonic()
    rng = np.random.default_rng(99)
    cfg = config_for_task("reconstruct", {"steps": 50, "cfg_scale": 1.0})
    worst = 0.0
    for i in range(10):
        z0 = backend.encode(random_image(rng))
        bank = invert(backend, z0, None, t_max=50, text_cond=None)
        z_back, state = run(backend, bank, None, cfg, None)
        assert state.gradient_calls == 0
        err = float((z_back.data - z0.data).abs().max())
        worst = max(worst, err)
        assert err < 1e-3, f"image {i}: reconstruction max-abs {err:.2e}"
    elapsed = time.monotonic() - started
    assert elapsed < 60, f"reconstruction suite took {elapsed:.1f}s, budget is 60s"
    print(
        f"PASS reconstruction: 10 random images, worst latent max-abs error "
        f"{worst:.2e} < 1e-3, {elapsed:.1f}s"
    )


def test_energy_arithmetic():
    """Endpoint values and monotonicity of the similarity-to-energy map."""
    one = energy_edit(torch.tensor(1.0, dtype=torch.float64))
    zero = energy_edit(torch.tensor(0.0, dtype=torch.float64))
    assert float(one) == 0.2
    assert float(zero) == 1.0
    grid = torch.linspace(0, 1, 100, dtype=torch.float64)
    values = [float(energy_edit(s)) for s in grid]
    assert all(a > b for a, b in zip(values, values[1:]))
    print("PASS energy-arithmetic: E(1)=0.2 and E(0)=1.0 exactly, strictly decreasing on a 100-point grid")


def test_gradient_gate_count(backend, banks):
    """T=50 with a 30-step gate: exactly 30 gradient evaluations, front-loaded."""
    spec = build_moving(block_mask(GRID, GRID, 4, 8, 3, 7), (5, 4))
    cfg = config_for_task("moving", {"steps": 50})
    assert cfg.n_gated == 30
    _, state = run(backend, banks["plain"], spec, cfg, banks["cond"])
    gated = [r.t for r in state.records if r.gradient_norm is not None]
    assert state.gradient_calls == 30
    assert gated == list(range(50, 20, -1))
    print(
        f"PASS gate: 50-step run logged exactly {state.gradient_calls} gradient "
        f"evaluations, at t=50..21"
    )


def test_mask_algebra_thousand_specs():
    """Brute-force set identities for the moving task's derived masks."""
    rng = np.random.default_rng(1234)
    violations = 0
    for _ in range(1000):
        h = int(rng.integers(6, 17))
        w = int(rng.integers(6, 17))
        data = rng.random((h, w)) < rng.uniform(0.1, 0.5)
        if not data.any():
            data[int(rng.integers(0, h)), int(rng.integers(0, w))] = True
        ys, xs = np.nonzero(data)
        dy = int(rng.integers(-ys.min(), (h - 1) - ys.max() + 1))
        dx = int(rng.integers(-xs.min(), (w - 1) - xs.max() + 1))
        spec = build_moving(Mask(data), (dy, dx))
        gen, gud = spec.m_gen.data, spec.m_gud.data
        share, ipt = spec.m_share.data, spec.m_ipt.data
        for y in range(h):
            for x in range(w):
                if share[y, x] != (not (gen[y, x] or gud[y, x])):
                    violations += 1
                if ipt[y, x] != (gud[y, x] and not gen[y, x]):
                    violations += 1
    assert violations == 0
    print("PASS mask-algebra: 1000 random moving specs, per-cell identities, 0 violations")


def test_attention_identities(backend, banks):
    """Substituting a step's own K/V is a no-op; concat keeps shapes; rows normalize."""
    entry = banks["ref"].lookup(25)
    z = entry.z_gud
    cond = banks["cond"]
    plain = backend.predict(z, 25, cond).noise_pred
    substituted = backend.predict(z, 25, cond, attn_override=entry.kv_gud).noise_pred
    sub_err = float((plain - substituted).abs().max())
    assert sub_err < 1e-6

    concat_plan = build_kv_plan(entry, "replacing")
    concat = backend.predict(z, 25, cond, attn_override=concat_plan.record).noise_pred
    assert concat.shape == plain.shape

    rng = np.random.default_rng(5)
    q = torch.from_numpy(rng.standard_normal((2, 6, 4)))
    k = torch.from_numpy(rng.standard_normal((2, 9, 4)))
    v = torch.from_numpy(rng.standard_normal((2, 9, 4)))
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(4), dim=-1)
    row_err = float((weights.sum(-1) - 1).abs().max())
    assert row_err < 1e-6
    assert torch.allclose(attend(q, k, v), weights @ v, atol=1e-12)
    print(
        f"PASS attention-identities: self-substitution max-abs {sub_err:.2e} < 1e-6, "
        f"concat preserves shape, softmax rows sum to 1 within {row_err:.2e}"
    )


def test_guidance_bends_the_path(backend):
    """A rigged pull toward a target patch must dominate the unguided path."""
    patch = torch.zeros(4, GRID, GRID, dtype=torch.float64)
    patch[:, 5:11, 5:11] = 1.0
    cfg = GuidanceConfig(eta=20.0, n_gated=30, steps=50, cfg_scale=1.0)
    ratios = []
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        z0 = backend.encode(random_image(rng))
        bank = invert(backend, z0, None, t_max=50, text_cond=None)
        target = z0.data + 2.0

        def pull(zl, t, entry):
            return (zl.data - target) * patch, None

        guided, gs = run(backend, bank, None, cfg, None, gradient_fn=pull)
        plain, _ = run(backend, bank, None, cfg, None)
        assert gs.gradient_calls == 30
        d_guided = float(((guided.data - target) * patch).norm())
        d_plain = float(((plain.data - target) * patch).norm())
        ratios.append(d_guided / d_plain)
        assert d_guided < 0.5 * d_plain, f"seed {seed}: ratio {d_guided / d_plain:.3f}"
    print(
        f"PASS guidance-effectiveness: 10 seeds, guided/unguided distance ratio "
        f"max {max(ratios):.2e} < 0.5"
    )


def test_eval_harness_hand_computed(tmp_path):
    """Synthetic displacement fixtures against hand-computed means."""
    targets = {
        "v": 1,
        "items": [
            {"id": "a", "targets": [[3, 4], [5, 12]], "initial": [[0, 0], [0, 0]]},
            {"id": "b", "targets": [[7, 24]], "initial": [[0, 0]]},
        ],
    }
    (tmp_path / "targets.json").write_text(json.dumps(targets))
    rdir = tmp_path / "results"
    rdir.mkdir()
    # distances: 5 (3-4-5), 13 (5-12-13), 25 (7-24-25); pooled mean 43/3
    (rdir / "a.json").write_text(json.dumps({"v": 1, "points": [[0, 0], [0, 0]]}))
    (rdir / "b.json").write_text(json.dumps({"v": 1, "points": [[0, 0]]}))
    report = evaluate(rdir, tmp_path / "targets.json")
    err = abs(report["mean_distance"] - 43.0 / 3.0)
    assert err < 1e-9
    assert abs(report["items"][0]["mean_distance"] - 9.0) < 1e-9
    assert abs(report["items"][1]["mean_distance"] - 25.0) < 1e-9
    print(f"PASS eval-harness: hand-computed pooled mean reproduced to {err:.1e} < 1e-9")


@pytest.mark.skipif(
    os.environ.get("DRAGEDIT_PRETRAINED") != "1",
    reason="optional, non-gating: needs a pretrained diffusion backend (set DRAGEDIT_PRETRAINED=1)",
)
def test_pretrained_smoke():
    backend = make_backend("pretrained")
    rng = np.random.default_rng(0)
    image = torch.from_numpy(rng.random((3, 512, 512)))
    z0 = backend.encode(image)
    bank = invert(backend, z0, None, t_max=50, text_cond=backend.condition(None))
    spec = build_moving(block_mask(512, 512, 200, 280, 150, 230), (0, 60))
    cfg = config_for_task("moving", {"steps": 50})
    result, state = run(backend, bank, spec, cfg, backend.condition(None))
    assert bool(torch.isfinite(result.data).all())
    assert len(state.records) == 50
    print("PASS pretrained-smoke: 50 steps, finite throughout")
