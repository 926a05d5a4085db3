"""Command-line entry point: ``dfnet <command> [--config FILE] [--key value ...]``.

Settings come from three layers, later ones winning: built-in per-task
defaults, a plain-text config file of ``key = value`` lines (``#`` starts a
comment), and command-line flags. Every command writes the fully resolved
settings to ``<out>/config.txt`` and writes nothing outside ``<out>``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, datagen, experiments as ex, flowviz, gradsuite, models
from .autodiff import Tensor
from .training import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("dfnet")

COMMANDS = ("train", "eval", "predict", "gradcheck", "viz-flow", "gen-data", "count-params")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# settings


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.replace(" ", "").split(",") if p]


def _str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return conv


@dataclass(frozen=True)
class Key:
    convert: Callable[[str], object]
    help: str


KEYS: dict[str, Key] = {
    "task": Key(_choice(*ex.TASKS), "steerable | mnist | driving | stereo"),
    "out": Key(str, "output directory (default dfnet-out)"),
    "seed": Key(int, "run seed for initialization and data (default 0)"),
    "checkpoint": Key(str, "model file for eval, predict and viz-flow"),
    "mnist_path": Key(str, "IDX image file; the bundled digit scans are used when unset"),
    "lr": Key(float, "Adam learning rate (default 0.001, or 0.003 for steerable)"),
    "iterations": Key(int, "training steps (per-task default)"),
    "batch": Key(int, "batch size (default 16)"),
    "loss": Key(_choice("bce", "euclidean"), "training loss (per-task default)"),
    "smoothness": Key(float, "weight of the flow smoothness penalty (default 0)"),
    "eval_every": Key(int, "evaluate on a small held-out set every N steps (default 0, off)"),
    "teacher_forcing": Key(_bool, "feed ground truth instead of predictions while training (default off)"),
    "enc_channels": Key(int, "encoder width c1 (default 32)"),
    "hidden_channels": Key(int, "hidden width c2 (default 64)"),
    "hidden_sizes": Key(_int_list, "steerable hidden layer sizes, comma separated (default 32)"),
    "filter_size": Key(int, "generated filter extent (default 9, or 13 for stereo width)"),
    "height": Key(int, "frame height (per-task default)"),
    "width": Key(int, "frame width (per-task default)"),
    "digits": Key(int, "moving digits per sequence (default 2)"),
    "bias": Key(_bool, "generate a per-pixel bias channel (default on for driving, off otherwise)"),
    "count": Key(int, "evaluation or export size (per-command default)"),
    "horizon": Key(int, "frames to predict (default: the task's output length)"),
    "seeds": Key(int, "random instances per op for gradcheck (default 20)"),
    "inputs": Key(_str_list, "comma-separated PGM files to use instead of generated inputs"),
}

TASK_DEFAULTS = {
    "steerable": {"iterations": 5000, "loss": "euclidean", "height": 32, "width": 32, "lr": 3e-3},
    "mnist": {"iterations": 20000, "loss": "bce", "height": 64, "width": 64},
    "driving": {"iterations": 2000, "loss": "euclidean", "height": 32, "width": 32},
    "stereo": {"iterations": 2000, "loss": "euclidean", "height": 64, "width": 128},
}
COMMON_DEFAULTS = {
    "out": "dfnet-out", "seed": 0, "lr": 1e-3, "batch": 16, "smoothness": 0.0, "eval_every": 0,
    "teacher_forcing": False, "enc_channels": 32, "hidden_channels": 64, "hidden_sizes": [32],
    "digits": 2, "seeds": 20,
}
# time steps (in, out) of the sequence tasks
SEQUENCE_STEPS = {"mnist": (10, 10), "driving": (3, 3)}


def _normalize(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_config_text(text: str, source: str = "config") -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _normalize(key)
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def _convert(key: str, value: str, where: str) -> object:
    if key not in KEYS:
        raise UsageError(f"{where}: unknown key {key!r}")
    try:
        return KEYS[key].convert(value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from None


def resolve(command: str, file_values: dict[str, object], flag_values: dict[str, object]) -> dict[str, object]:
    merged = {**file_values, **flag_values}
    task = merged.get("task")
    if task is None and command not in ("gradcheck",):
        raise UsageError(f"{command} needs a task (--task {'|'.join(ex.TASKS)})")
    cfg: dict[str, object] = {"command": command, **COMMON_DEFAULTS}
    if task is not None:
        cfg.update(TASK_DEFAULTS[task])
    if task == "stereo":
        cfg["filter_size"] = 13
    else:
        cfg["filter_size"] = 9
    cfg["bias"] = task == "driving"
    cfg.update(merged)
    return cfg


def format_config(cfg: dict[str, object]) -> str:
    lines = [f"# resolved settings (dfnet {__version__})", f"# command: {cfg['command']}"]
    for key in sorted(k for k in cfg if k != "command"):
        value = cfg[key]
        if isinstance(value, bool):
            text = "on" if value else "off"
        elif isinstance(value, list):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfnet", description="Dynamic filter networks: training, evaluation and visualization.")
    parser.add_argument("--version", action="version", version=f"dfnet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=_COMMAND_HELP[name])
        p.add_argument("--config", help="file of 'key = value' lines")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
        for key, spec in KEYS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE", help=spec.help)
    return parser


_COMMAND_HELP = {
    "train": "train a model; writes model.dfn and metrics.tsv",
    "eval": "print the task metric of a checkpoint on the pinned test split",
    "predict": "write input / ground truth / prediction montages",
    "gradcheck": "run the finite-difference gradient suite",
    "viz-flow": "write flow color maps of a checkpoint's generated filters",
    "gen-data": "export sample batches of a task's generator",
    "count-params": "print the parameter count of a task's model",
}


# ---------------------------------------------------------------------------
# model and data helpers


def _video_cfg(cfg, with_bias: bool) -> models.VideoNetConfig:
    return models.VideoNetConfig(
        cfg["height"], cfg["width"], cfg["enc_channels"], cfg["hidden_channels"], cfg["filter_size"], with_bias
    )


def build_model(cfg):
    task = cfg["task"]
    dtype = np.float32
    if task == "steerable":
        return models.build_steerable_net(cfg["hidden_sizes"], cfg["filter_size"], seed=cfg["seed"], dtype=dtype)
    if task in ("mnist", "driving"):
        return models.build_video_net(_video_cfg(cfg, cfg["bias"]), seed=cfg["seed"], dtype=dtype)
    return models.build_stereo_net(
        models.StereoNetConfig(cfg["height"], cfg["width"], cfg["enc_channels"], cfg["hidden_channels"], cfg["filter_size"]),
        seed=cfg["seed"], dtype=dtype,
    )


_TASK_KINDS = {"steerable": ("steerable",), "mnist": ("video", "video_bias"), "driving": ("video", "video_bias"), "stereo": ("stereo",)}


def _load_model(cfg):
    path = cfg.get("checkpoint")
    if path is None or str(path).lower() == "none":
        raise UsageError(f"{cfg['command']} needs a trained model (--checkpoint FILE)")
    model, _ = load_checkpoint(path)
    if model.kind not in _TASK_KINDS[cfg["task"]]:
        raise UsageError(f"checkpoint holds a {model.kind} model, which does not fit task {cfg['task']}")
    return model


def _frame_size(cfg, model=None) -> tuple[int, int]:
    if model is not None and "height" in model.arch:
        return model.arch["height"], model.arch["width"]
    return cfg["height"], cfg["width"]


def _digit_split(cfg):
    return ex.load_digits(cfg.get("mnist_path"))


def _mnist_cfg(cfg, size: int) -> datagen.MovingMnistConfig:
    t_in, t_out = SEQUENCE_STEPS["mnist"]
    return datagen.MovingMnistConfig(num_digits=cfg["digits"], frame_size=size, t_in=t_in, t_out=t_out)


def _driving_cfg(cfg, h: int, w: int) -> datagen.DrivingConfig:
    t_in, t_out = SEQUENCE_STEPS["driving"]
    return datagen.DrivingConfig(h, w, t_in, t_out)


def _stereo_cfg(h: int, w: int) -> datagen.StereoConfig:
    return datagen.StereoConfig(h, w)


def _check_loss(cfg, model) -> None:
    if model.kind != "video" and cfg["loss"] != "euclidean":
        raise UsageError(f"loss {cfg['loss']} does not suit a {model.kind} model; use euclidean")


def _train_source(cfg, model):
    task, seed, batch = cfg["task"], cfg["seed"], cfg["batch"]
    h, w = _frame_size(cfg, model)
    if task == "steerable":
        return ex.steerable_source(seed, batch, h)
    if task == "mnist":
        train_digits, _ = _digit_split(cfg)
        return ex.mnist_source(train_digits, _mnist_cfg(cfg, h), seed, batch)
    if task == "driving":
        return ex.driving_source(_driving_cfg(cfg, h, w), seed, batch)
    return ex.stereo_source(_stereo_cfg(h, w), seed, batch)


def evaluate(cfg, model, count: int) -> dict[str, float]:
    """Task metric (and reference baseline) on the pinned test split."""
    task = cfg["task"]
    h, w = _frame_size(cfg, model)
    if task == "steerable":
        rep = ex.evaluate_steerable(model, count=count, image_size=h)
        out = {"mse": rep.mse, "relative_mse": rep.relative_mse}
        out.update({f"cos_{int(k)}deg": v for k, v in rep.cos_sims.items()})
        return out
    if task == "mnist":
        _, test_digits = _digit_split(cfg)
        seqs = ex.mnist_test_set(test_digits, cfg["digits"], count, frame_size=h)
        return {"bce": ex.evaluate_video(model, seqs, "bce"), "copy_last_bce": ex.copy_last_baseline(seqs, "bce")}
    if task == "driving":
        seqs = ex.driving_test_set(_driving_cfg(cfg, h, w), count)
        return {
            "euclidean": ex.evaluate_video(model, seqs, "euclidean"),
            "copy_last_euclidean": ex.copy_last_baseline(seqs, "euclidean"),
        }
    sc = _stereo_cfg(h, w)
    rep = ex.evaluate_stereo(model, ex.stereo_test_set(sc, count), sc.disparities)
    return {"euclidean": rep.loss, "copy_left_euclidean": rep.baseline, "ordering_fraction": rep.ordering_fraction}


_EVAL_COUNTS = {"steerable": 256, "mnist": ex.TEST_SEQUENCES, "driving": 256, "stereo": 64}


def _read_inputs(paths: list[str], h: int, w: int) -> np.ndarray:
    frames = []
    for p in paths:
        img = flowviz.read_pnm(p)
        if img.channels != 1:
            raise UsageError(f"{p}: expected a grayscale PGM")
        if (img.height, img.width) != (h, w):
            raise UsageError(f"{p}: image is {img.height}x{img.width}, the model expects {h}x{w}")
        frames.append(img.samples[:, :, 0].astype(np.float32) / 255.0)
    return np.stack(frames)[:, None]


def _sample_data(cfg, model, count: int):
    """Inputs for predict / viz-flow: from --inputs files or the test generator.

    Sequence tasks return a SequenceBatch (ground truth may be absent when
    reading files), stereo returns ``(left, right_or_None)``, steerable
    returns ``(images, angles, targets)``.
    """
    task = cfg["task"]
    h, w = _frame_size(cfg, model)
    files = cfg.get("inputs")
    if task == "steerable":
        return datagen.steerable_batch(ex.TEST_SEED, 0, count, h)
    if task == "stereo":
        if files:
            return _read_inputs(files, h, w), None
        left, right, _ = ex.stereo_test_set(_stereo_cfg(h, w), count)
        return left, right
    t_in, t_out = SEQUENCE_STEPS[task]
    horizon = cfg.get("horizon") or t_out
    if files:
        return _read_inputs(files, h, w)[None], horizon
    if task == "mnist":
        _, test_digits = _digit_split(cfg)
        seqs = ex.mnist_test_set(test_digits, cfg["digits"], count, frame_size=h)
    else:
        seqs = ex.driving_test_set(_driving_cfg(cfg, h, w), count)
    return seqs, horizon


def _scaled(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, out: Path) -> int:
    model = build_model(cfg)
    _check_loss(cfg, model)
    tcfg = TrainConfig(
        lr=cfg["lr"], iterations=cfg["iterations"], batch=cfg["batch"], loss=cfg["loss"],
        smoothness=cfg["smoothness"], seed=cfg["seed"], eval_every=cfg["eval_every"],
        teacher_forcing=cfg["teacher_forcing"],
    )
    evaluator = None
    if cfg["eval_every"]:
        small = {"steerable": 64, "mnist": 32, "driving": 32, "stereo": 16}[cfg["task"]]
        metric = {"steerable": "mse", "mnist": "bce", "driving": "euclidean", "stereo": "euclidean"}[cfg["task"]]
        evaluator = lambda m: evaluate(cfg, m, small)[metric]
    progress = max(1, cfg["iterations"] // 20)
    result = train(model, _train_source(cfg, model), tcfg, evaluate=evaluator,
                   log_path=out / "metrics.tsv", progress_every=progress)
    save_checkpoint(model, out / "model.dfn", result.adam)
    print(f"trained {cfg['task']} model for {cfg['iterations']} steps; final loss {result.log[-1][1]:.6g}")
    print(f"checkpoint {out / 'model.dfn'}")
    print(f"metrics {out / 'metrics.tsv'}")
    return EXIT_OK


def cmd_eval(cfg, out: Path) -> int:
    model = _load_model(cfg)
    count = cfg.get("count") or _EVAL_COUNTS[cfg["task"]]
    metrics = evaluate(cfg, model, count)
    lines = [f"{k} {v:.6g}" for k, v in metrics.items()]
    (out / "eval.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_predict(cfg, out: Path) -> int:
    model = _load_model(cfg)
    task = cfg["task"]
    count = cfg.get("count") or 4
    written = []
    if task == "steerable":
        images, angles, targets = _sample_data(cfg, model, count)
        outputs = models.steerable_forward(model, images, angles).data
        for i in range(len(angles)):
            lo = min(targets[i].min(), outputs[i].min())
            hi = max(targets[i].max(), outputs[i].max())
            img_lo, img_hi = images.data[i].min(), images.data[i].max()
            tiles = [
                flowviz.to_raster(_scaled(images.data[i], img_lo, img_hi)),
                flowviz.to_raster(_scaled(targets[i], lo, hi)),
                flowviz.to_raster(_scaled(outputs[i], lo, hi)),
            ]
            written.append(_write(out / f"predict_{i:03d}.pgm", flowviz.montage(tiles, 3)))
    elif task == "stereo":
        left, right = _sample_data(cfg, model, count)
        pred, _ = models.stereo_predict(model, left)
        for i in range(len(left)):
            tiles = [flowviz.to_raster(left[i])]
            if right is not None:
                tiles.append(flowviz.to_raster(right[i]))
            tiles.append(flowviz.to_raster(pred.data[i]))
            written.append(_write(out / f"predict_{i:03d}.pgm", flowviz.montage(tiles, len(tiles))))
    else:
        data, horizon = _sample_data(cfg, model, count)
        if isinstance(data, datagen.SequenceBatch):
            frames, t_in = data.frames, data.t_in
            truth = data.frames[:, t_in:t_in + horizon] if data.t_out >= horizon else None
        else:
            frames, t_in, truth = data, data.shape[1], None
        inputs = [Tensor(frames[:, t]) for t in range(t_in)]
        preds = models.video_predict(model, inputs, horizon)
        for i in range(frames.shape[0]):
            ins = [flowviz.to_raster(frames[i, t]) for t in range(t_in)]
            tiles = []
            if truth is not None:
                tiles += ins + [flowviz.to_raster(truth[i, t]) for t in range(horizon)]
            tiles += ins + [flowviz.to_raster(p[i]) for p in preds]
            written.append(_write(out / f"predict_{i:03d}.pgm", flowviz.montage(tiles, t_in + horizon)))
    print(f"wrote {len(written)} montages to {out}")
    return EXIT_OK


def _flow_at(field, index: int) -> flowviz.FlowMap:
    flow = flowviz.filters_to_flow(field)
    return flowviz.FlowMap(flow.u[index], flow.v[index])


def _gray_to_rgb(image: flowviz.RasterImage) -> flowviz.RasterImage:
    return flowviz.RasterImage(np.repeat(image.samples, 3, axis=2))


def cmd_viz_flow(cfg, out: Path) -> int:
    model = _load_model(cfg)
    task = cfg["task"]
    if task == "steerable":
        raise UsageError("steerable filters are shared across positions and have no flow map; use mnist, driving or stereo")
    count = cfg.get("count") or 4
    written = []
    if task == "stereo":
        left, _ = _sample_data(cfg, model, count)
        _, fld = models.stereo_predict(model, left)
        max_mag = model.arch["filter_width"] // 2
        for i in range(len(left)):
            tiles = [_gray_to_rgb(flowviz.to_raster(left[i])), flowviz.flow_to_color(_flow_at(fld, i), max_mag=max_mag)]
            written.append(_write(out / f"flow_{i:03d}.ppm", flowviz.montage(tiles, 2)))
    else:
        data, horizon = _sample_data(cfg, model, count)
        frames = data.frames if isinstance(data, datagen.SequenceBatch) else data
        t_in = data.t_in if isinstance(data, datagen.SequenceBatch) else frames.shape[1]
        roll = models.video_rollout(model, [Tensor(frames[:, t]) for t in range(t_in)], horizon)
        max_mag = model.arch["filter_size"] // 2
        for i in range(frames.shape[0]):
            tiles = [_gray_to_rgb(flowviz.to_raster(frames[i, t_in - 1]))]
            tiles += [flowviz.flow_to_color(_flow_at(f, i), max_mag=max_mag) for f in roll.fields]
            written.append(_write(out / f"flow_{i:03d}.ppm", flowviz.montage(tiles, len(tiles))))
    print(f"wrote {len(written)} flow maps to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg, out: Path) -> int:
    result = gradsuite.run_suite(seeds=cfg["seeds"], base_seed=cfg["seed"])
    lines = [f"{name} {err:.3e}" for name, err in result.per_op.items()]
    lines.append(f"max_rel_error {result.max_rel_error:.3e} ({'pass' if result.passed else 'FAIL'}, "
                 f"tolerance {gradsuite.TOLERANCE:g}, {result.seeds} seeds per op)")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not result.passed:
        print("gradient check failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_data(cfg, out: Path) -> int:
    task = cfg["task"]
    count = cfg.get("count") or 4
    seed = cfg["seed"]
    h, w = cfg["height"], cfg["width"]
    previews = []
    if task == "steerable":
        images, angles, targets = datagen.steerable_batch(seed, 0, count, h)
        np.savez(out / "steerable.npz", images=images.data, angles=angles, targets=targets)
        for i in range(count):
            lo, hi = targets[i].min(), targets[i].max()
            tiles = [flowviz.to_raster(_scaled(images.data[i], images.data[i].min(), images.data[i].max())),
                     flowviz.to_raster(_scaled(targets[i], lo, hi))]
            previews.append(flowviz.montage(tiles, 2))
    elif task == "stereo":
        sc = _stereo_cfg(h, w)
        left, right, disp = datagen.stereo_batch(seed, 0, count, sc)
        np.savez(out / "stereo.npz", left=left, right=right, disparity=disp)
        for i in range(count):
            tiles = [flowviz.to_raster(left[i]), flowviz.to_raster(right[i]),
                     flowviz.to_raster(disp[i] / datagen.MAX_STEREO_DISPARITY)]
            previews.append(flowviz.montage(tiles, 3))
    else:
        if task == "mnist":
            train_digits, _ = _digit_split(cfg)
            seqs = datagen.moving_mnist_batch(train_digits, _mnist_cfg(cfg, h), seed, 0, count)
        else:
            seqs = datagen.driving_batch(seed, 0, count, _driving_cfg(cfg, h, w))
        extra = {k: np.asarray(v) for k, v in seqs.meta.items()}
        np.savez(out / f"{task}.npz", frames=seqs.frames, t_in=seqs.t_in, t_out=seqs.t_out, **extra)
        steps = seqs.frames.shape[1]
        for i in range(count):
            previews.append(flowviz.montage([flowviz.to_raster(seqs.frames[i, t]) for t in range(steps)], steps))
    for i, img in enumerate(previews):
        _write(out / f"sample_{i:03d}.pgm", img)
    print(f"wrote {count} {task} samples to {out}")
    return EXIT_OK


def cmd_count_params(cfg, out: Path) -> int:
    model = build_model(cfg)
    total = models.count_parameters(model)
    lines = []
    for name, p in model.params.items():
        lines.append(f"{name:<16} {str(p.shape):<20} {p.size:>10,}")
    lines.append(f"{'total':<16} {'':<20} {total:>10,}")
    reference = {"mnist": "637,361 (video net)", "stereo": "464,494 (stereo net)"}.get(cfg["task"])
    if reference:
        lines.append(f"published reference: {reference}")
    (out / "params.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _write(path: Path, image: flowviz.RasterImage) -> Path:
    if image.channels == 1:
        flowviz.write_pgm(image, path)
    else:
        flowviz.write_ppm(image, path)
    return path


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "viz-flow": cmd_viz_flow,
    "gen-data": cmd_gen_data,
    "count-params": cmd_count_params,
}


def run(argv: list[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        flags = {k: _convert(k, v, "--" + k.replace("_", "-")) for k, v in vars(args).items()
                 if k in KEYS and v is not None}
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
            file_values = parse_config_text(text, args.config)
        cfg = resolve(args.command, file_values, flags)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(cfg))
        return HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"dfnet: {exc}", file=sys.stderr)
        print("usage: dfnet {" + ",".join(COMMANDS) + "} [--config FILE] [--key VALUE ...]; "
              "see dfnet <command> --help", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, datagen.IDXFormatError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"dfnet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
