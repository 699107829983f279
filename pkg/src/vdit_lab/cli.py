"""Command-line front end.

Every subcommand resolves one experiment spec (built-in defaults, then the
``--config`` JSON file, then flags), writes ``manifest.json`` into ``--out``
and only then produces its result files.  ``reproduce`` replays a manifest.

Exit codes: 0 success, 1 runtime failure, 2 spec/config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .capture import CaptureFilter, CaptureStore, parse_index_list
from .errors import ConfigError, LabError
from .jobs import default_jobs
from .layout import histogram_image, render_heatmap, structure_report, write_ppm
from .model import (
    DenoiseSchedule, ModelConfig, build_model, denoise, first_token_only, make_noise, prompt_embedding,
    reinit_layers,
)
from .serialization import RunManifest, load_checkpoint, make_manifest, save_checkpoint, save_latents, read_trace, write_trace

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "model": {},
    "checkpoint": None,
    "seed": [0],
    "noise_seed": 0,
    "steps": None,
    "out": "out",
    "jobs": 1,
    "emit_heatmaps": False,
    "downsample": 1,
    "capture": None,
    "k": [0.1, 0.3, 0.5, 0.7],
    "layers": None,
    "exclude_layers": [],
    "temperature": [0.2, 1.0, 1.2],
    "tau_w": 0.3,
    "tau_q": 0.5,
    "min_frequency": 0.5,
    "trace": None,
    "target_seed": None,
    "same_prompt": False,
    "same_seed": False,
    "study": False,
    "first_token_only": False,
    "skip_mode": "both",
    "skip_seed": 0,
    "train_steps": None,
    "warmup": 20,
    "ema_beta": 0.99,
    "lr": 1e-3,
    "batch_size": 4,
    "reinit": False,
    "train_io": False,
    "data_seed": 0,
}


class SpecError(ConfigError):
    pass


def _int_list(text: str) -> list[int]:
    if text.strip() == "all":
        return ["all"]  # type: ignore[list-item]
    return parse_index_list(text)


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment spec; flags override its fields")
    common.add_argument("--checkpoint", help="TVDT checkpoint to load instead of building from the config")
    common.add_argument("--seed", type=_int_list, help="prompt seed(s), comma separated")
    common.add_argument("--noise-seed", type=int)
    common.add_argument("--steps", type=int, help="denoising steps")
    common.add_argument("--out")
    common.add_argument("--jobs", type=int)
    common.add_argument("--emit-heatmaps", action="store_true", default=None)
    common.add_argument("--downsample", type=int)
    common.add_argument("--capture", help="capture filter, e.g. 'layer=0;head=0-1;step=0'")
    common.add_argument("--k", type=_float_list)
    common.add_argument("--layers", type=_int_list)
    common.add_argument("--exclude-layers", type=_int_list)
    common.add_argument("--temperature", type=_float_list)
    common.add_argument("--tau-w", type=float)
    common.add_argument("--tau-q", type=float)
    common.add_argument("--min-frequency", type=float)
    common.add_argument("--trace", help="source ATRC trace for transfer")
    common.add_argument("--target-seed", type=int)
    common.add_argument("--same-prompt", action="store_true", default=None)
    common.add_argument("--same-seed", action="store_true", default=None)
    common.add_argument("--study", action="store_true", default=None, help="transfer: per-layer study")
    common.add_argument("--first-token-only", action="store_true", default=None)
    common.add_argument("--skip-mode", choices=["detected_sinks", "random_matched", "both"])
    common.add_argument("--skip-seed", type=int)
    common.add_argument("--train-steps", type=int)
    common.add_argument("--warmup", type=int)
    common.add_argument("--ema-beta", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--reinit", action="store_true", default=None)
    common.add_argument("--train-io", action="store_true", default=None)
    common.add_argument("--data-seed", type=int)

    p = argparse.ArgumentParser(prog="vdit-lab", description="Attention lab for a toy video DiT")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("generate", "denoise one prompt; optional trace capture and heatmaps"),
        ("structure", "frame-offset band mass and text-token share per layer"),
        ("sweep-sparsity", "bottom-k masking across layers for each k"),
        ("layer-sensitivity", "bottom-k masking one layer at a time"),
        ("temperature", "temperature sweep on one layer"),
        ("sinks", "sink detection and statistics"),
        ("skip-heads", "zero sink heads vs. random matched heads"),
        ("transfer", "self-attention map transfer"),
        ("retrain", "reinitialize/retrain layers with the rest frozen"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    rp = sub.add_parser("reproduce", help="rerun the experiment recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    return p


def load_spec_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise SpecError(f"{path}: cannot read config ({e.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise SpecError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(data) - set(DEFAULTS) - {"command"})
    if unknown:
        raise SpecError(f"{path}: unknown field(s) {unknown}")
    return data


def resolve_spec(command: str, args: argparse.Namespace) -> dict:
    spec = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        spec.update(load_spec_file(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            spec[key] = v
    spec["command"] = command
    if isinstance(spec["seed"], int):
        spec["seed"] = [spec["seed"]]
    if spec["jobs"] is None or spec["jobs"] < 1:
        spec["jobs"] = default_jobs()
    try:
        ModelConfig.from_dict(spec["model"])
    except (TypeError, ConfigError) as e:
        raise SpecError(f"field 'model': {e}") from None
    return spec


def _model(spec: dict):
    if spec["checkpoint"]:
        return load_checkpoint(spec["checkpoint"])
    return build_model(ModelConfig.from_dict(spec["model"]))


def _schedule(spec: dict, model) -> DenoiseSchedule:
    steps = model.config.steps if spec["steps"] is None else spec["steps"]
    if steps < 0:
        raise SpecError("field 'steps': must be >= 0")
    return DenoiseSchedule.linear(steps, model.config.sigma_max)


def _layers(spec: dict, key: str, num_layers: int, default=None) -> list[int]:
    v = spec[key]
    if v is None:
        return list(range(num_layers)) if default is None else default
    if v == ["all"] or v == "all":
        return list(range(num_layers))
    return [int(x) for x in v]


def _seed(spec: dict) -> int:
    if len(spec["seed"]) != 1:
        raise SpecError(f"field 'seed': {spec['command']} takes one prompt seed")
    return int(spec["seed"][0])


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, model, spec: dict, schedule: DenoiseSchedule, interventions=None) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    experiment = {k: v for k, v in spec.items() if k != "out"}
    extra: dict[str, Any] = {"experiment": experiment}
    if spec["checkpoint"]:
        extra["checkpoint_sha256"] = _file_sha(spec["checkpoint"])
    m = make_manifest(model, spec["seed"][0], spec["noise_seed"], schedule, interventions, **extra)
    m.write(out / "manifest.json")
    return m


def _text(spec: dict, model, seed: int):
    text = prompt_embedding(model.config, seed)
    if spec["first_token_only"]:
        text = first_token_only(text)
    return text


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def cmd_generate(spec: dict) -> None:
    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    seed = _seed(spec)
    noise = make_noise(model.config, spec["noise_seed"])
    capture = CaptureFilter.parse(spec["capture"]) if spec["capture"] else None
    latents, records = denoise(model, noise, _text(spec, model, seed), schedule, capture=capture)
    save_latents(out / "noise.npy", noise)
    save_latents(out / "latents.npy", latents)
    if capture is not None:
        from .transfer import AttentionTrace

        trace = AttentionTrace(make_manifest(model, seed, spec["noise_seed"], schedule, capture=capture.describe()),
                               model.attention_layout, model.config.num_layers, model.config.num_heads,
                               schedule.steps, {r.key: r for r in records}, latents)
        write_trace(trace, out / "trace.atrc")
        if spec["emit_heatmaps"]:
            hm = out / "heatmaps"
            hm.mkdir(exist_ok=True)
            for r in records:
                write_ppm(hm / f"L{r.layer}_H{r.head}_S{r.step}.ppm", render_heatmap(r, spec["downsample"]))


def cmd_structure(spec: dict) -> None:
    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    seed = _seed(spec)
    capture = CaptureFilter.parse(spec["capture"]) if spec["capture"] else CaptureFilter(steps={max(schedule.steps - 1, 0)})
    _, records = denoise(model, make_noise(model.config, spec["noise_seed"]), _text(spec, model, seed), schedule,
                         capture=capture)
    layout = model.attention_layout
    per_layer: dict[int, list] = {}
    for r in records:
        per_layer.setdefault(r.layer, []).append(structure_report(r, layout))
    summary = {}
    for layer, reps in sorted(per_layer.items()):
        band = {str(d): float(np.mean([rp.band_mass[d] for rp in reps])) for d in range(layout.num_frames)}
        entry: dict[str, Any] = {"band_mass": band, "text_mass": float(np.mean([rp.text_mass for rp in reps]))}
        if layout.num_text:
            entry["first_token_dominance"] = float(np.mean([rp.first_token_dominance for rp in reps]))
            entry["text_share"] = np.mean([rp.text_share for rp in reps], axis=0).tolist()
        summary[str(layer)] = entry
    (out / "structure.json").write_text(json.dumps({"layers": summary}, indent=2, sort_keys=True) + "\n")
    if spec["emit_heatmaps"]:
        hm = out / "heatmaps"
        hm.mkdir(exist_ok=True)
        for r in records:
            write_ppm(hm / f"L{r.layer}_H{r.head}_S{r.step}.ppm", render_heatmap(r, spec["downsample"]))


def _sparsity_outputs(out: Path, stem: str, reports, emit: bool) -> None:
    from .sparsity import reports_summary, write_reports_csv, write_summary_json

    write_reports_csv(out / f"{stem}.csv", reports)
    write_summary_json(out / f"{stem}.json", reports_summary(reports))
    if emit:
        write_ppm(out / f"{stem}_curve.ppm", histogram_image(np.array([[r.mse for r in reports]])))


def cmd_sweep_sparsity(spec: dict) -> None:
    from .sparsity import exclusion_sweep

    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    excluded = _layers(spec, "exclude_layers", model.config.num_layers, default=[])
    reports = exclusion_sweep(model, _seed(spec), sorted(spec["k"]), excluded, schedule, spec["noise_seed"], spec["jobs"])
    _sparsity_outputs(out, "sparsity", reports, spec["emit_heatmaps"])


def cmd_layer_sensitivity(spec: dict) -> None:
    from .sparsity import layer_sensitivity_sweep

    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    if len(spec["k"]) != 1:
        raise SpecError("field 'k': layer-sensitivity takes a single k")
    reports = layer_sensitivity_sweep(model, _seed(spec), spec["k"][0], schedule, spec["noise_seed"], spec["jobs"])
    _sparsity_outputs(out, "layer_sensitivity", reports, spec["emit_heatmaps"])


def cmd_temperature(spec: dict) -> None:
    from .sparsity import temperature_sweep

    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    layers = _layers(spec, "layers", model.config.num_layers, default=[model.config.num_layers - 1])
    if len(layers) != 1:
        raise SpecError("field 'layers': temperature takes a single layer")
    points = temperature_sweep(model, _seed(spec), layers[0], spec["temperature"], schedule, spec["noise_seed"], spec["jobs"])
    with open(out / "temperature.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "temperature", "mean_entropy", "mse"])
        for p in points:
            w.writerow([layers[0], repr(p.temperature), repr(p.mean_entropy), repr(p.mse)])
            save_latents(out / f"latents_T{p.temperature:g}.npy", p.latents)
    (out / "temperature.json").write_text(json.dumps(
        {"layer": layers[0], "points": [{"temperature": p.temperature, "mean_entropy": p.mean_entropy, "mse": p.mse}
                                        for p in points]}, indent=2) + "\n")


def cmd_sinks(spec: dict) -> None:
    from .sinks import SinkCriterion, sink_statistics

    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    crit = SinkCriterion(spec["tau_w"], spec["tau_q"])
    capture = CaptureFilter.parse(spec["capture"]) if spec["capture"] else CaptureFilter()
    capture = CaptureFilter(capture.layers, capture.heads, capture.steps, values=True, validate=False)
    noise = make_noise(model.config, spec["noise_seed"])

    def runs():
        for seed in spec["seed"]:
            yield denoise(model, noise, _text(spec, model, int(seed)), schedule, capture=capture)[1]

    cfg = model.config
    report = sink_statistics(runs(), model.attention_layout, crit, cfg.num_layers, cfg.num_heads, max(schedule.steps, 1))
    (out / "sinks.json").write_text(report.to_json() + "\n")
    report.write_frequency_csv(out / "sink_frequency.csv")
    if spec["emit_heatmaps"]:
        layout = model.attention_layout
        write_ppm(out / "sink_spatial.ppm", histogram_image(report.spatial_grid(layout)))
        write_ppm(out / "sink_temporal.ppm", histogram_image(report.temporal_counts(layout)))


def cmd_skip_heads(spec: dict) -> None:
    from .sinks import SinkCriterion, skip_heads_run

    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    crit = SinkCriterion(spec["tau_w"], spec["tau_q"])
    modes = ["detected_sinks", "random_matched"] if spec["skip_mode"] == "both" else [spec["skip_mode"]]
    results = {}
    for mode in modes:
        r = skip_heads_run(model, _seed(spec), mode, schedule=schedule, criterion=crit, noise_seed=spec["noise_seed"],
                           seed=spec["skip_seed"], min_frequency=spec["min_frequency"])
        save_latents(out / f"latents_{mode}.npy", r.latents)
        results[mode] = {"mse": r.mse, "count": r.count, "fraction": r.fraction, "total_heads": r.total_heads,
                         "skipped": [list(x) for x in r.skipped]}
    (out / "skip_heads.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


def cmd_transfer(spec: dict) -> None:
    from .transfer import layerwise_transfer_study, record_trace, replay_with_transfer

    model = _model(spec)
    schedule = _schedule(spec, model)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    src_seed = _seed(spec)
    if spec["trace"]:
        trace = read_trace(spec["trace"])
    else:
        trace = record_trace(model, src_seed, spec["noise_seed"], schedule,
                             CaptureFilter.parse(spec["capture"]) if spec["capture"] else None)
        write_trace(trace, out / "source_trace.atrc")
    target = trace.manifest.prompt_seed if spec["same_prompt"] else spec["target_seed"]
    if target is None:
        raise SpecError("field 'target_seed': required unless --same-prompt is given")
    noise_seed = trace.manifest.noise_seed if spec["same_seed"] else spec["noise_seed"]
    layers = _layers(spec, "layers", model.config.num_layers, default=sorted(trace.layers()))
    res = replay_with_transfer(model, target, noise_seed, schedule, trace, layers)
    save_latents(out / "latents.npy", res.latents)
    summary: dict[str, Any] = {
        "layers": list(res.layers), "target_seed": target, "noise_seed": noise_seed,
        "mse_to_source": res.mse_to_source, "mse_to_baseline": res.mse_to_baseline,
        "layer_divergence": {str(k): v for k, v in res.layer_divergence.items()},
    }
    if spec["study"]:
        study = layerwise_transfer_study(model, trace, target, schedule, noise_seed, spec["jobs"])
        summary["study"] = {
            "ranking": study.ranking(),
            "baseline_mse_to_source": study.baseline_mse_to_source,
            "full": {"mse_to_source": study.full.mse_to_source, "mse_to_baseline": study.full.mse_to_baseline},
        }
        with open(out / "transfer_layers.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "mse_to_source", "mse_to_baseline"])
            for r in study.per_layer:
                w.writerow([r.layers[0], repr(r.mse_to_source), repr(r.mse_to_baseline)])
    (out / "transfer.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_retrain(spec: dict) -> None:
    from .training import TrainingConfig, retrain, synth_dataset

    model = _model(spec)
    # --steps counts optimizer steps here when --train-steps is absent; the
    # sigma levels always come from the model's own schedule
    train_steps = spec["train_steps"]
    if train_steps is None:
        train_steps = 500 if spec["steps"] is None else spec["steps"]
    if train_steps < 0:
        raise SpecError("field 'train_steps': must be >= 0")
    schedule = DenoiseSchedule.linear(model.config.steps, model.config.sigma_max)
    out = Path(spec["out"])
    _write_manifest(out, model, spec, schedule)
    L = model.config.num_layers
    layers = _layers(spec, "layers", L, default=list(range(max(L - 4, 0), L)))
    if spec["reinit"]:
        reinit_layers(model, layers, spec["data_seed"])
    tc = TrainingConfig(trainable_layers=frozenset(layers), train_io=spec["train_io"], lr=spec["lr"],
                        warmup_steps=spec["warmup"], ema_beta=spec["ema_beta"], batch_size=spec["batch_size"],
                        total_steps=train_steps, seed=spec["data_seed"])
    count = max(tc.total_steps * tc.batch_size, 1)
    model, ema_model, trace = retrain(model, tc, synth_dataset(model.config, spec["data_seed"], count), schedule)
    save_checkpoint(model, out / "model.tvdt")
    save_checkpoint(ema_model, out / "model_ema.tvdt")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for i, (lr, loss) in enumerate(zip(trace.lrs, trace.losses)):
            w.writerow([i, repr(lr), repr(loss)])


COMMANDS = {
    "generate": cmd_generate,
    "structure": cmd_structure,
    "sweep-sparsity": cmd_sweep_sparsity,
    "layer-sensitivity": cmd_layer_sensitivity,
    "temperature": cmd_temperature,
    "sinks": cmd_sinks,
    "skip-heads": cmd_skip_heads,
    "transfer": cmd_transfer,
    "retrain": cmd_retrain,
}


def run_spec(spec: dict) -> None:
    COMMANDS[spec["command"]](spec)


def reproduce(manifest_path: str, out: str) -> None:
    m = RunManifest.read(manifest_path)
    spec = dict(m.extra.get("experiment") or {})
    if "command" not in spec:
        raise SpecError(f"{manifest_path}: manifest carries no experiment spec")
    if spec.get("checkpoint") and _file_sha(spec["checkpoint"]) != m.extra.get("checkpoint_sha256"):
        raise SpecError(f"{manifest_path}: checkpoint {spec['checkpoint']} changed since the run")
    spec["out"] = out
    run_spec(spec)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        if args.command == "reproduce":
            reproduce(args.manifest, args.out)
        else:
            run_spec(resolve_spec(args.command, args))
    except (SpecError, ConfigError) as e:
        print(f"vdit-lab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LabError, RuntimeError, OSError, ValueError) as e:
        print(f"vdit-lab: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
