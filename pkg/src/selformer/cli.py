"""Command-line pipeline: scene synthesis, band reduction, training,
evaluation, map rendering, gradient checks, parameter sweeps, and attention
benchmarking.

Settings resolve as flags > config file > defaults; the config file is flat
``key = value`` lines with ``#`` comments. Exit codes: 0 ok, 1 validation,
2 numerical failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SplitSpec,
    PcaModel,
    extract_patches,
    fit_pca,
    load_scene,
    normalize_bands,
    save_scene,
    stratified_split,
    synth_scene,
)
from .ksa import write_selection_trace
from .metrics import emit_map, evaluate
from .model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from .tensor import NumericsError, Tensor, no_grad
from .train import (
    TrainConfig,
    format_gradcheck_report,
    predict,
    run_gradcheck,
    train_loop,
)
from .tsa import TsaParams, tsa_forward, write_attention_traces

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

RUN_ROOT_ENV = "SELFORMER_RUN_ROOT"

SWEEP_RATES = (0.2, 0.4, 0.6, 0.8, 1.0)
SWEEP_GROUPS = (1, 2, 4, 8)
BENCH_RATES = (0.2, 0.4, 0.6, 0.8, 1.0)

MODEL_KEYS = {
    "bands": int, "patch_size": int, "embed_dim": int, "token_patch": int,
    "heads": int, "groups": int, "select_rate": float, "stg_count": int,
    "tstb_per_stg": int, "ffn_ratio": int, "head_mode": str,
}
TRAIN_KEYS = {
    "learning_rate": float, "weight_decay": float, "epochs": int,
    "batch_size": int, "seed": int, "checkpoint_every": int,
}
DATA_KEYS = {"train_per_class": int, "split_seed": int, "pca_components": int}


class CliError(ValueError):
    """Validation failure surfaced with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep 2 for numerics
        raise CliError(message)


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class Settings:
    """Layered lookup: explicit flags, then the config file, then defaults."""

    def __init__(self, args: argparse.Namespace):
        self.flags = {k: v for k, v in vars(args).items() if v is not None}
        self.file: dict[str, str] = {}
        config_path = self.flags.get("config")
        if config_path:
            self.file = parse_config_file(config_path)

    def get(self, key: str, cast, default):
        if key in self.flags:
            return self.flags[key]
        if key in self.file:
            raw = self.file[key]
            try:
                if cast is bool:
                    return raw.lower() in ("1", "true", "yes")
                return cast(raw)
            except ValueError as exc:
                raise CliError(f"config key {key}={raw!r} is not a valid {cast.__name__}") from exc
        return default

    def model_config(self, class_count: int, scene_bands: int) -> ModelConfig:
        kwargs = {"class_count": class_count}
        defaults = {"bands": scene_bands}
        for key, cast in MODEL_KEYS.items():
            fallback = defaults.get(key, getattr(ModelConfig, key, None))
            value = self.get(key, cast, fallback)
            if value is not None:
                kwargs[key] = value
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        preset = self.get("preset", str, "desk")
        if preset not in ("desk", "full"):
            raise CliError(f"unknown preset {preset!r}; use 'desk' or 'full'")
        epochs_default = 200 if preset == "desk" else 500
        return TrainConfig(
            learning_rate=self.get("learning_rate", float, 1e-4),
            weight_decay=self.get("weight_decay", float, 1e-5),
            epochs=self.get("epochs", int, epochs_default),
            batch_size=self.get("batch_size", int, 64),
            seed=self.get("seed", int, 0),
            checkpoint_every=self.get("checkpoint_every", int, 0),
        )


def resolve_run_dir(path_str: str) -> Path:
    path = Path(path_str)
    if not path.is_absolute():
        root = os.environ.get(RUN_ROOT_ENV)
        if root:
            path = Path(root) / path
    return path


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir: Path, command: str, seed: int, config: dict,
                   outputs: dict, created: str) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "created_utc": created,
        "finished_utc": utc_now(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_split_patches(scene, settings, patch_size):
    patches = extract_patches(scene.data, scene.labels, patch_size)
    per_class = settings.get("train_per_class", int, None)
    if per_class is None:
        return patches, None, None
    split_seed = settings.get("split_seed", int, settings.get("seed", int, 0))
    train_idx, test_idx = stratified_split(
        patches.class_ids, SplitSpec(per_class=per_class, seed=split_seed)
    )
    return patches, train_idx, test_idx


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    s = Settings(args)
    cube = synth_scene(
        classes=s.get("classes", int, 4),
        bands=s.get("bands", int, 8),
        height=s.get("height", int, 64),
        width=s.get("width", int, 64),
        noise=s.get("noise", float, 0.05),
        seed=s.get("seed", int, 0),
    )
    out = save_scene(cube, args.out)
    print(f"wrote scene {out} ({cube.bands} bands, {cube.data.shape[1]}x{cube.data.shape[2]}, "
          f"{cube.class_count} classes)")
    return EXIT_OK


def cmd_pca(args) -> int:
    s = Settings(args)
    scene = load_scene(args.scene)
    components = s.get("pca_components", int, args.components)
    normed = normalize_bands(scene)
    model = fit_pca(normed, components, seed=s.get("seed", int, 0))
    reduced = model.transform_cube(normed.data)
    from .data import HsiCube

    out_cube = HsiCube(data=reduced, labels=scene.labels, class_names=scene.class_names)
    out = save_scene(out_cube, args.out)
    model_path = Path(args.model_out) if args.model_out else out / "pca_model.json"
    model_path.write_text(json.dumps(model.to_dict()) + "\n")
    variances = ", ".join(f"{v:.4g}" for v in model.explained_variance)
    print(f"wrote reduced scene {out} ({components} bands; variances {variances})")
    return EXIT_OK


def cmd_train(args) -> int:
    s = Settings(args)
    scene = load_scene(args.scene)
    model_config = s.model_config(scene.class_count, scene.bands)
    if model_config.bands != scene.bands:
        raise CliError(
            f"scene has {scene.bands} bands but the model expects {model_config.bands}; "
            "run the pca command first"
        )
    train_config = s.train_config()
    run_dir = resolve_run_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    created = utc_now()

    patches, train_idx, test_idx = load_split_patches(scene, s, model_config.patch_size)
    if train_idx is None:
        raise CliError("train requires --train-per-class to draw the training split")
    params = init_model(model_config, seed=train_config.seed)
    result = train_loop(
        params, model_config, train_config,
        patches.cubes[train_idx], patches.class_ids[train_idx] - 1,
        run_dir=run_dir,
    )
    outputs = {
        "checkpoint": result.checkpoint_path,
        "train_log": run_dir / "train_log.jsonl",
    }
    write_manifest(
        run_dir, "train", train_config.seed,
        {
            "model": model_config.to_dict(),
            "train": train_config.__dict__,
            "data": {
                "scene": str(args.scene),
                "train_per_class": s.get("train_per_class", int, None),
                "split_seed": s.get("split_seed", int, train_config.seed),
                "train_size": int(train_idx.size),
                "test_size": int(test_idx.size),
            },
        },
        outputs, created,
    )
    final = result.log[-1]
    print(f"trained {train_config.epochs} epochs; final loss {final['loss']:.4f} "
          f"train_acc {final['train_acc']:.3f}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    s = Settings(args)
    params, model_config = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    if scene.bands != model_config.bands:
        raise CliError(
            f"scene has {scene.bands} bands but the checkpoint expects {model_config.bands}"
        )
    patches, train_idx, test_idx = load_split_patches(scene, s, model_config.patch_size)
    chosen = test_idx if test_idx is not None else np.arange(patches.class_ids.size)
    preds = predict(params, model_config, patches.cubes[chosen])
    report = evaluate(preds, patches.class_ids[chosen] - 1, scene.class_count)
    out = Path(args.out)
    out.write_text(report.to_json() + "\n")

    if args.trace_attention or args.trace_selection:
        sample = Tensor(patches.cubes[chosen][:1])
        with no_grad():
            _, record = forward(sample, params, model_config, trace=True)
        if args.trace_attention:
            flattened = [t for block in record.attention for t in block]
            write_attention_traces(
                flattened, args.trace_attention, first_head_only=args.first_head_only
            )
        if args.trace_selection:
            write_selection_trace(record.kernel, args.trace_selection)

    print(f"evaluated {report.sample_count} samples: OA {report.overall_accuracy:.4f} "
          f"AA {report.average_accuracy:.4f} kappa {report.kappa:.4f}; report {out}")
    return EXIT_OK


def cmd_map(args) -> int:
    params, model_config = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    if scene.bands != model_config.bands:
        raise CliError(
            f"scene has {scene.bands} bands but the checkpoint expects {model_config.bands}"
        )
    labels = scene.labels
    if args.all_pixels:
        labels = np.ones_like(scene.labels)
    patches = extract_patches(scene.data, labels, model_config.patch_size)
    preds = predict(params, model_config, patches.cubes)
    raster = np.zeros_like(scene.labels)
    raster[patches.pixels[:, 0], patches.pixels[:, 1]] = preds + 1
    out = emit_map(raster, args.out)
    print(f"wrote classification map {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    s = Settings(args)
    results = run_gradcheck(
        seed=s.get("seed", int, 0),
        coords_per_tensor=s.get("coords", int, 8),
    )
    print(format_gradcheck_report(results))
    if not all(r.passed for r in results):
        raise NumericsError("gradient check failed; see report above")
    return EXIT_OK


def cmd_sweep(args) -> int:
    s = Settings(args)
    scene = load_scene(args.scene)
    run_dir = resolve_run_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    created = utc_now()
    train_config = s.train_config()
    base_config = s.model_config(scene.class_count, scene.bands)

    axis = args.axis
    rates = SWEEP_RATES if axis in ("k", "both") else (base_config.select_rate,)
    groups = SWEEP_GROUPS if axis in ("g", "both") else (base_config.groups,)

    patches, train_idx, test_idx = load_split_patches(scene, s, base_config.patch_size)
    if train_idx is None:
        raise CliError("sweep requires --train-per-class to draw the training split")

    out = Path(args.out) if args.out else run_dir / "sweep.csv"
    rows = ["k,g,oa"]
    for rate in rates:
        for group in groups:
            cell = ModelConfig(
                **{**base_config.to_dict(), "select_rate": rate, "groups": group}
            )
            params = init_model(cell, seed=train_config.seed)
            train_loop(
                params, cell, train_config,
                patches.cubes[train_idx], patches.class_ids[train_idx] - 1,
            )
            preds = predict(params, cell, patches.cubes[test_idx])
            report = evaluate(preds, patches.class_ids[test_idx] - 1, scene.class_count)
            rows.append(f"{rate},{group},{report.overall_accuracy:.6f}")
            print(f"cell k={rate} g={group}: OA {report.overall_accuracy:.4f}")
    out.write_text("\n".join(rows) + "\n")
    write_manifest(
        run_dir, "sweep", train_config.seed,
        {
            "model": base_config.to_dict(),
            "train": train_config.__dict__,
            "data": {"scene": str(args.scene), "axis": axis},
        },
        {"csv": out}, created,
    )
    print(f"wrote sweep grid {out} ({len(rows) - 1} cells)")
    return EXIT_OK


def cmd_bench(args) -> int:
    s = Settings(args)
    embed = s.get("embed_dim", int, 32)
    heads = s.get("heads", int, 2)
    groups = s.get("groups", int, 2)
    height = s.get("height", int, 8)
    width = s.get("width", int, 8)
    repeats = s.get("repeats", int, 5)
    rng = np.random.default_rng(s.get("seed", int, 0))
    fixed_input = rng.normal(size=(embed, height, width))
    rows = ["k,wall_ms"]
    for rate in BENCH_RATES:
        params = TsaParams.create(embed, heads, groups, rate, np.random.default_rng(1))
        x = Tensor(fixed_input)
        with no_grad():
            tsa_forward(x, params)  # warm up
            started = time.perf_counter()
            for _ in range(repeats):
                tsa_forward(x, params)
            elapsed = (time.perf_counter() - started) / repeats * 1000.0
        rows.append(f"{rate},{elapsed:.3f}")
        print(f"k={rate}: {elapsed:.2f} ms per forward")
    Path(args.out).write_text("\n".join(rows) + "\n")
    print(f"wrote timings {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--seed", type=int, help="random seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="selformer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled scene")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pca", help="fit band reduction and write the reduced scene")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=30)
    p.add_argument("--model-out", dest="model_out")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("train", help="train a model on a scene")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--preset", choices=("desk", "full"))
    for key, cast in {**MODEL_KEYS, **TRAIN_KEYS}.items():
        if key != "seed":
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=cast)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a scene")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-class", dest="train_per_class", type=int,
                   help="evaluate only the held-out split drawn with this budget")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--trace-attention", dest="trace_attention",
                   help="dump per-head score matrices and masks for one patch")
    p.add_argument("--first-head-only", dest="first_head_only", action="store_true")
    p.add_argument("--trace-selection", dest="trace_selection",
                   help="dump kernel-branch selection weights for one patch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render the predicted classification map")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-pixels", dest="all_pixels", action="store_true",
                   help="predict every pixel instead of only labeled ones")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("gradcheck", help="finite-difference check of every module")
    _add_common(p)
    p.add_argument("--coords", type=int, help="sampled coordinates per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid of selection rates and group counts")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--out")
    p.add_argument("--axis", choices=("k", "g", "both"), default="both")
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    for key, cast in {**MODEL_KEYS, **TRAIN_KEYS}.items():
        if key != "seed":
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=cast)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time token-selective attention across rates")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericsError as exc:
        print(f"error: numeric: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: validation: {_one_line(exc)}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return EXIT_IO


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
