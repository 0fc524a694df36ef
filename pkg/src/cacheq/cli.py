"""Batch command line: seven commands composing the library into
artifact-to-artifact steps.

Exit codes group the failures: 2 for bad invocations and missing inputs
(the message names the expected path), 3 for corrections fitted under a
different schedule, 4 for malformed artifact files. Every command writes one
artifact and prints one log line with the resolved config hash and the
content hashes of its inputs. Nothing embeds timestamps, so re-running a
command on identical inputs reproduces identical bytes. CQ_SEED, when set,
overrides --seed everywhere.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import click

from . import trajectory
from .dec import CorrectionSet, corrections_from_dict, corrections_to_dict
from .dps import (
    CacheSchedule,
    InfeasibleError,
    cost_matrix,
    group_count,
    schedule_from_dict,
    schedule_to_dict,
    solve,
    uniform_schedule,
)
from .hashing import digest, digest_file
from .pipeline import (
    CONFIG_NAMES,
    DatasetSpec,
    ModelArch,
    QuantPack,
    SamplerConfig,
    StaleCorrectionsError,
    ToyDenoiser,
    TrainConfig,
    QuadrantSettings,
    build_quant_pack,
    fit_correction_set,
    group_monotonic_fraction,
    load_model,
    pack_from_dict,
    pack_to_dict,
    report_to_dict,
    run_quadrant,
    sample_accelerated,
    sample_reference,
    save_model,
    train_toy,
    write_error_csv,
)

__all__ = ["main"]


class MissingInput(click.ClickException):
    exit_code = 2


class StaleArtifact(click.ClickException):
    exit_code = 3


class BadArtifact(click.ClickException):
    exit_code = 4


def _config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not Path(path).exists():
        raise MissingInput(f"missing input: expected config at {path}")
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BadArtifact(f"config {path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise BadArtifact(f"config {path} must hold a JSON object")
    return payload


def _pick(flag, cfg: dict, key: str, default):
    return flag if flag is not None else cfg.get(key, default)


def _seed(flag, cfg: dict, default: int = 0) -> int:
    env = os.environ.get("CQ_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise click.UsageError(f"CQ_SEED must be an integer, got {env!r}")
    return int(_pick(flag, cfg, "seed", default))


def _require(path, what: str) -> Path:
    if path is None:
        raise click.UsageError(f"--{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing input: expected {what} at {p}")
    return p


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BadArtifact(f"{what} {path} is not valid JSON: {exc}")


def _log(command: str, out_path, config_hash: str, inputs: dict) -> None:
    parts = "".join(
        f" {name}={digest_file(p)[:12]}" for name, p in inputs.items()
    )
    click.echo(f"{command}: wrote {out_path} config={config_hash[:12]}{parts}")


def _load_model_file(path) -> ToyDenoiser:
    p = _require(path, "model")
    try:
        return load_model(p)
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        raise BadArtifact(f"model {p}: {exc}")


def _load_trajectory(path) -> trajectory.FeatureTrajectory:
    p = _require(path, "trajectory")
    try:
        return trajectory.load(p)
    except trajectory.TrajectoryFormatError as exc:
        raise BadArtifact(f"trajectory {p}: {exc}")


def _load_schedule(path) -> CacheSchedule:
    p = _require(path, "schedule")
    try:
        return schedule_from_dict(_read_json(p, "schedule"))
    except (ValueError, KeyError, TypeError) as exc:
        raise BadArtifact(f"schedule {p}: {exc}")


def _load_pack(path) -> QuantPack:
    p = _require(path, "quant-pack")
    try:
        return pack_from_dict(_read_json(p, "quant pack"))
    except (ValueError, KeyError, TypeError) as exc:
        raise BadArtifact(f"quant pack {p}: {exc}")


def _load_corrections(path) -> CorrectionSet:
    p = _require(path, "corrections")
    try:
        return corrections_from_dict(_read_json(p, "corrections"))
    except (ValueError, KeyError, TypeError) as exc:
        raise BadArtifact(f"corrections {p}: {exc}")


def _sampler(cfg: dict, seed: int) -> SamplerConfig:
    return SamplerConfig(
        kind=cfg.get("sampler", "deterministic"),
        seed=seed,
        batch_size=int(cfg.get("batch_size", 256)),
    )


@click.group()
@click.version_option(package_name="cacheq")
def main():
    """Joint feature caching and quantization for the toy denoiser.

    Commands compose through files: train -> capture -> schedule ->
    quantize -> correct -> sample -> report.
    """


@main.command()
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--T", "steps", type=int, default=None, help="Denoising steps.")
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def train(out, steps, seed, config_path):
    """Train the toy denoiser and write the model file."""
    cfg = _config(config_path)
    steps = int(_pick(steps, cfg, "T", 100))
    seed = _seed(seed, cfg)
    dataset = DatasetSpec(kind=cfg.get("dataset", "gaussian_ring"))
    overrides = {
        k: cfg[k] for k in ("iterations", "batch_size", "learning_rate") if k in cfg
    }
    tconf = TrainConfig(**overrides)
    resolved = {
        "command": "train", "T": steps, "seed": seed, "dataset": dataset.kind,
        "iterations": tconf.iterations, "batch_size": tconf.batch_size,
        "learning_rate": tconf.learning_rate,
    }
    h = digest(resolved)
    model = train_toy(dataset, tconf, seed, arch=ModelArch(steps=steps))
    save_model(model, out, config_hash=h)
    _log("train", out, h, {})


@main.command()
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def capture(model_path, out, seed, config_path):
    """Record the cacheable feature at every step of reference runs."""
    cfg = _config(config_path)
    seed = _seed(seed, cfg)
    seeds = tuple(int(s) for s in cfg.get("capture_seeds", [seed]))
    model = _load_model_file(model_path)
    sampler = _sampler(cfg, seeds[0])
    traj = trajectory.capture(model, sampler, seeds)
    trajectory.save(traj, out)
    # The trajectory format has no header slot for the config hash; the log
    # line is its only carrier.
    h = digest({
        "command": "capture", "seeds": list(seeds), "sampler": sampler.kind,
        "batch_size": sampler.batch_size, "model": digest_file(_require(model_path, "model")),
    })
    _log("capture", out, h, {"model": model_path})


@main.command()
@click.option("--trajectory", "traj_path", type=click.Path(path_type=Path), default=None)
@click.option("--T", "steps", type=int, default=None,
              help="Expected step count; checked against the trajectory.")
@click.option("--N", "n_target", type=int, default=None, help="Target group length.")
@click.option("--no-limits", is_flag=True, help="Solve without group-length limits.")
@click.option("--uniform", is_flag=True, help="Emit the fixed-stride schedule instead.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def schedule(traj_path, steps, n_target, no_limits, uniform, out, config_path):
    """Solve the cache schedule on a captured trajectory."""
    cfg = _config(config_path)
    n_target = int(_pick(n_target, cfg, "N", 10))
    traj = _load_trajectory(traj_path)
    T = traj.steps
    if steps is not None and steps != T:
        raise click.UsageError(f"--T {steps} does not match the trajectory's {T} steps")
    limits_on = (not no_limits) and bool(cfg.get("limits", True))
    K = group_count(T, n_target)
    if uniform:
        band = min(n_target, T - 1)
    elif limits_on:
        band = min(2 * n_target, T - 1)
    else:
        band = T - K + 1 if K > 1 else T - 1
    try:
        costs = cost_matrix(traj, band=band)
        if uniform:
            sched = uniform_schedule(T, n_target, costs)
        else:
            sched = solve(costs, n_target, limits_on=limits_on)
    except InfeasibleError as exc:
        raise click.UsageError(str(exc))
    h = digest({
        "command": "schedule", "N": n_target, "uniform": uniform,
        "limits": limits_on, "trajectory": digest_file(traj_path),
    })
    payload = schedule_to_dict(sched)
    payload["config_hash"] = h
    _write_json(out, payload)
    _log("schedule", out, h, {"trajectory": traj_path})


@main.command()
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--schedule", "schedule_path", type=click.Path(path_type=Path), default=None,
              help="Calibrate activations per cache group of this schedule.")
@click.option("--wbits", type=int, default=None)
@click.option("--abits", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def quantize(model_path, schedule_path, wbits, abits, seed, out, config_path):
    """Quantize the model's layers and calibrate activation ranges."""
    cfg = _config(config_path)
    wbits = int(_pick(wbits, cfg, "wbits", 8))
    abits = int(_pick(abits, cfg, "abits", 8))
    seed = _seed(seed, cfg)
    scope = cfg.get("scope", "site")
    if isinstance(scope, list):
        scope = tuple(scope)
    model = _load_model_file(model_path)
    sched = _load_schedule(schedule_path) if schedule_path is not None else None
    if sched is not None and sched.steps != model.steps:
        raise click.UsageError(
            f"schedule covers {sched.steps} steps, model has {model.steps}"
        )
    seeds = tuple(int(s) for s in cfg.get("calib_seeds", [seed]))
    sampler = _sampler(cfg, seeds[0])
    try:
        pack = build_quant_pack(model, wbits, abits, sampler, seeds,
                                scope=scope, schedule=sched)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    inputs = {"model": model_path}
    if schedule_path is not None:
        inputs["schedule"] = schedule_path
    h = digest({
        "command": "quantize", "wbits": wbits, "abits": abits,
        "scope": list(pack.scope), "seeds": list(seeds),
        "sampler": sampler.kind, "batch_size": sampler.batch_size,
        "inputs": {k: digest_file(v) for k, v in inputs.items()},
    })
    payload = pack_to_dict(pack)
    payload["config_hash"] = h
    _write_json(out, payload)
    _log("quantize", out, h, inputs)


@main.command()
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--schedule", "schedule_path", type=click.Path(path_type=Path), default=None)
@click.option("--quant-pack", "pack_path", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def correct(model_path, schedule_path, pack_path, seed, out, config_path):
    """Fit per-step corrections for one schedule (and optionally one pack)."""
    cfg = _config(config_path)
    seed = _seed(seed, cfg)
    model = _load_model_file(model_path)
    sched = _load_schedule(schedule_path)
    if sched.steps != model.steps:
        raise click.UsageError(
            f"schedule covers {sched.steps} steps, model has {model.steps}"
        )
    pack = _load_pack(pack_path) if pack_path is not None else None
    seeds = tuple(int(s) for s in cfg.get("calib_seeds", [seed]))
    sampler = _sampler(cfg, seeds[0])
    corrections = fit_correction_set(model, sampler, sched, quant=pack, seeds=seeds)
    inputs = {"model": model_path, "schedule": schedule_path}
    if pack_path is not None:
        inputs["quant-pack"] = pack_path
    h = digest({
        "command": "correct", "seeds": list(seeds), "sampler": sampler.kind,
        "batch_size": sampler.batch_size,
        "inputs": {k: digest_file(v) for k, v in inputs.items()},
    })
    payload = corrections_to_dict(corrections)
    payload["config_hash"] = h
    _write_json(out, payload)
    _log("correct", out, h, inputs)


@main.command()
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--schedule", "schedule_path", type=click.Path(path_type=Path), default=None)
@click.option("--quant-pack", "pack_path", type=click.Path(path_type=Path), default=None)
@click.option("--corrections", "corrections_path", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def sample(model_path, schedule_path, pack_path, corrections_path, seed, out, config_path):
    """Draw samples under any combination of caching and quantization."""
    cfg = _config(config_path)
    seed = _seed(seed, cfg)
    model = _load_model_file(model_path)
    sched = _load_schedule(schedule_path) if schedule_path is not None else None
    pack = _load_pack(pack_path) if pack_path is not None else None
    corrections = (
        _load_corrections(corrections_path) if corrections_path is not None else None
    )
    if corrections is not None and sched is None:
        raise click.UsageError("corrections require a cache schedule")
    sampler = _sampler(cfg, seed)
    try:
        if sched is None:
            result = sample_reference(model, sampler, quant=pack)
        else:
            result = sample_accelerated(model, sampler, sched, quant=pack,
                                        corrections=corrections)
    except StaleCorrectionsError as exc:
        raise StaleArtifact(str(exc))
    inputs = {"model": model_path}
    for name, p in (("schedule", schedule_path), ("quant-pack", pack_path),
                    ("corrections", corrections_path)):
        if p is not None:
            inputs[name] = p
    h = digest({
        "command": "sample", "seed": seed, "sampler": sampler.kind,
        "batch_size": sampler.batch_size,
        "inputs": {k: digest_file(v) for k, v in inputs.items()},
    })
    payload = {
        "config_hash": h,
        "kind": sampler.kind,
        "seed": seed,
        "count": int(result.samples.shape[0]),
        "cost": {
            "macs": result.cost.macs,
            "bops": result.cost.bops,
            "size_mb": result.cost.size_mb,
        },
        "samples": [[float(v) for v in row] for row in result.samples],
    }
    _write_json(out, payload)
    _log("sample", out, h, inputs)


@main.command()
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--N", "n_target", type=int, default=None)
@click.option("--wbits", type=int, default=None)
@click.option("--abits", type=int, default=None)
@click.option("--seed", type=int, default=None, help="Evaluation seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def report(model_path, n_target, wbits, abits, seed, out_dir, config_path):
    """Run the five-way comparison and write tables, curves, and figures."""
    from .plotting import plot_error_curves, plot_quadrant, plot_samples  # lazy: pulls in matplotlib

    cfg = _config(config_path)
    n_target = int(_pick(n_target, cfg, "N", 5))
    wbits = int(_pick(wbits, cfg, "wbits", 8))
    abits = int(_pick(abits, cfg, "abits", 8))
    eval_seed = _seed(seed, cfg, default=7)
    defaults = QuadrantSettings()
    settings = QuadrantSettings(
        n_target=n_target, weight_bits=wbits, act_bits=abits,
        scope=cfg.get("scope", defaults.scope),
        kind=cfg.get("sampler", defaults.kind),
        calib_seeds=tuple(int(s) for s in cfg.get("calib_seeds", defaults.calib_seeds)),
        calib_batch=int(cfg.get("calib_batch", defaults.calib_batch)),
        eval_seed=eval_seed,
        eval_batch=int(cfg.get("eval_batch", defaults.eval_batch)),
        errors_batch=int(cfg.get("errors_batch", defaults.errors_batch)),
        n_projections=int(cfg.get("n_projections", defaults.n_projections)),
        metric_seed=int(cfg.get("metric_seed", defaults.metric_seed)),
    )
    model = _load_model_file(model_path)
    result = run_quadrant(model, settings)

    h = digest({
        "command": "report", "N": n_target, "wbits": wbits, "abits": abits,
        "eval_seed": eval_seed, "calib_seeds": list(settings.calib_seeds),
        "sampler": settings.kind, "model": digest_file(_require(model_path, "model")),
    })
    out_dir.mkdir(parents=True, exist_ok=True)

    table = {}
    for name in CONFIG_NAMES:
        outcome = result.outcomes[name]
        table[name] = {
            "distance": outcome.distance,
            "macs": outcome.cost.macs,
            "bops": outcome.cost.bops,
            "size_mb": outcome.cost.size_mb,
        }
    curves = {
        name: report_to_dict(result.outcomes[name].errors)
        for name in CONFIG_NAMES
        if result.outcomes[name].errors is not None
    }
    naive_errors = result.outcomes["combined_naive"].errors
    payload = {
        "config_hash": h,
        "settings": {
            "N": settings.n_target, "wbits": settings.weight_bits,
            "abits": settings.act_bits, "sampler": settings.kind,
            "calib_seeds": list(settings.calib_seeds),
            "eval_seed": settings.eval_seed, "eval_batch": settings.eval_batch,
            "n_projections": settings.n_projections,
        },
        "schedules": {
            "dps": schedule_to_dict(result.dps_schedule),
            "uniform": schedule_to_dict(result.uniform),
        },
        "table": table,
        "orderings": {
            "ours_beats_naive": result.ours_beats_naive(),
            "naive_worse_than_parts": result.naive_worse_than_parts(),
        },
        "monotonic_fraction": {
            "combined_naive": group_monotonic_fraction(
                naive_errors.e_total, result.uniform
            ),
        },
        "error_curves": curves,
    }
    _write_json(out_dir / "report.json", payload)

    for name in curves:
        write_error_csv(result.outcomes[name].errors, out_dir / f"errors_{name}.csv")
        schedule_of = result.dps_schedule if name == "combined_ours" else result.uniform
        plot_error_curves(result.outcomes[name].errors, schedule_of,
                          out_dir / f"errors_{name}.png")
    plot_quadrant(result.distances(), out_dir / "quadrant.png")
    plot_samples({n: result.outcomes[n].samples for n in CONFIG_NAMES},
                 out_dir / "samples.png")
    _log("report", out_dir, h, {"model": model_path})


if __name__ == "__main__":
    main()
