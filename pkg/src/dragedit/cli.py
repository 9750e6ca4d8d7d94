"""Batch command line: invert, edit, reconstruct, eval, serve.

All commands exit nonzero with a one-line message on contract failures.
Images are PNG; edit specs, eval targets and reports are JSON.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import yaml

from . import evaluation, imaging
from .config import (
    GuidanceConfig,
    config_for_task,
    load_profiles,
    make_backend,
    service_settings,
)
from .errors import BankError, ContractError
from .inversion import invert, load_bank, read_manifest, save_bank
from .sampler import run
from .tasks import SpecValidationError, from_payload


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _backend(profile: str, seed):
    return make_backend(profile, load_profiles(), seed)


backend_profile_option = click.option(
    "--backend-profile",
    default=None,
    help="Profile name from the profiles file (default: service setting).",
)
seed_option = click.option("--seed", type=int, default=None, help="Backend weight seed.")


def _resolve_profile(name):
    return name or service_settings()["backend_profile"]


@click.group()
def main():
    """Gradient-guided diffusion image editing."""


@main.command()
@click.argument("image", type=click.Path(exists=True))
@click.option("--ref", type=click.Path(exists=True), default=None, help="Reference image.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Bank directory.")
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--prompt", default=None, help="Text condition; reused when editing.")
@backend_profile_option
@seed_option
def invert_cmd(image, ref, out_dir, steps, prompt, backend_profile, seed):
    """Invert IMAGE (and an optional reference) into a memory bank."""
    try:
        backend = _backend(_resolve_profile(backend_profile), seed)
        z0 = backend.encode(imaging.load_image(image))
        z0_ref = backend.encode(imaging.load_image(ref)) if ref else None
        cond = backend.condition(prompt)
        started = time.perf_counter()
        bank = invert(backend, z0, z0_ref, steps, cond)
        preparing = time.perf_counter() - started
        save_bank(
            bank,
            out_dir,
            extras={"prompt": prompt, "preparing_seconds": preparing},
        )
    except (ContractError, BankError) as exc:
        _fail(str(exc))
    click.echo(f"bank written to {out_dir} (T={steps}, preparing {preparing:.3f}s)")


main.add_command(invert_cmd, name="invert")


def _load_bank_for(backend, bank_dir):
    return load_bank(bank_dir, expected_profile_hash=backend.profile.content_hash())


def _config_overrides(config_file, steps, cfg_scale, n_gated, eta):
    overrides = {}
    if config_file:
        loaded = yaml.safe_load(Path(config_file).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ContractError(f"{config_file} must hold a mapping of config fields")
        overrides.update(loaded)
    for key, value in (
        ("steps", steps),
        ("cfg_scale", cfg_scale),
        ("n_gated", n_gated),
        ("eta", eta),
    ):
        if value is not None:
            overrides[key] = value
    return overrides


@main.command()
@click.argument("bank_dir", type=click.Path(exists=True))
@click.argument("spec_json", type=click.Path(exists=True))
@click.argument("out_png", type=click.Path())
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None, help="Sampling steps [default: 50].")
@click.option("--cfg-scale", type=float, default=None, help="CFG scale [default: 5].")
@click.option("--n-gated", type=int, default=None, help="Gradient steps [default: 30].")
@click.option("--eta", type=float, default=None, help="Guidance step size.")
@click.option("--prompt", default=None, help="Override the prompt stored in the bank.")
@backend_profile_option
@seed_option
def edit_cmd(
    bank_dir, spec_json, out_png, config_file, steps, cfg_scale, n_gated, eta,
    prompt, backend_profile, seed,
):
    """Run the edit described by SPEC_JSON against a bank."""
    try:
        spec = from_payload(json.loads(Path(spec_json).read_text()))
        backend = _backend(_resolve_profile(backend_profile), seed)
        bank = _load_bank_for(backend, bank_dir)
        overrides = _config_overrides(config_file, steps, cfg_scale, n_gated, eta)
        overrides.update(spec.weight_overrides)
        overrides.setdefault("steps", bank.t_max)
        cfg = config_for_task(spec.kind, overrides)
        manifest = read_manifest(bank_dir)
        cond = backend.condition(prompt if prompt is not None else manifest.get("prompt"))
        started = time.perf_counter()
        result, state = run(backend, bank, spec, cfg, cond)
        inference = time.perf_counter() - started
        imaging.save_image(backend.decode(result), out_png)
        Path(str(out_png) + ".steps.jsonl").write_text(state.to_jsonl() + "\n")
    except SpecValidationError as exc:
        _fail("invalid spec: " + "; ".join(f"{e['field']}: {e['message']}" for e in exc.errors))
    except (ContractError, BankError) as exc:
        _fail(str(exc))
    click.echo(
        f"edit written to {out_png} "
        f"(gradient steps {state.gradient_calls}, inference {inference:.3f}s)"
    )


main.add_command(edit_cmd, name="edit")


@main.command()
@click.argument("bank_dir", type=click.Path(exists=True))
@click.argument("out_png", type=click.Path())
@click.option("--prompt", default=None)
@backend_profile_option
@seed_option
def reconstruct_cmd(bank_dir, out_png, prompt, backend_profile, seed):
    """Replay a bank with no edit; checks inversion fidelity."""
    try:
        backend = _backend(_resolve_profile(backend_profile), seed)
        bank = _load_bank_for(backend, bank_dir)
        manifest = read_manifest(bank_dir)
        cond = backend.condition(prompt if prompt is not None else manifest.get("prompt"))
        cfg = config_for_task("reconstruct", {"steps": bank.t_max, "cfg_scale": 1.0})
        result, _ = run(backend, bank, None, cfg, cond)
        imaging.save_image(backend.decode(result), out_png)
    except (ContractError, BankError) as exc:
        _fail(str(exc))
    click.echo(f"reconstruction written to {out_png}")


main.add_command(reconstruct_cmd, name="reconstruct")


@main.command()
@click.argument("results_dir", type=click.Path(exists=True))
@click.argument("targets_json", type=click.Path(exists=True))
@click.option("--out", "out_json", type=click.Path(), default=None, help="Report JSON path.")
def eval_cmd(results_dir, targets_json, out_json):
    """Score edited keypoints against their targets."""
    try:
        report = evaluation.evaluate(results_dir, targets_json)
    except (ContractError, BankError) as exc:
        _fail(str(exc))
    click.echo(evaluation.format_report(report))
    if out_json:
        Path(out_json).write_text(json.dumps(report, indent=1, sort_keys=True))


main.add_command(eval_cmd, name="eval")


@main.command()
@click.option("--port", type=int, default=None)
@click.option("--storage", type=click.Path(), default=None)
@click.option("--workers", type=int, default=None)
@backend_profile_option
def serve_cmd(port, storage, workers, backend_profile):
    """Start the HTTP job service."""
    import uvicorn

    from .service.app import create_app

    settings = service_settings()
    if port is not None:
        settings["port"] = port
    if storage is not None:
        settings["storage_dir"] = storage
    if workers is not None:
        settings["workers"] = workers
    if backend_profile is not None:
        settings["backend_profile"] = backend_profile
    app = create_app(settings)
    uvicorn.run(app, host="127.0.0.1", port=settings["port"], log_level="warning")


main.add_command(serve_cmd, name="serve")


if __name__ == "__main__":
    main()
