"""``ndconv`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .density import SynthConfig, generate_dataset, load_dataset, load_manifest, save_dataset
from .errors import ConfigError, FormatError, NDConvError, NumericalError
from .export import sampling_positions, write_pgm
from .gradcheck import SUITES, run_suite
from .model import FINAL_KINDS, ModelConfig, build_model
from .ndloss import uniformity_report
from .tensor import load_tensor
from .train import TrainConfig, TrainState, checkpoint_load, checkpoint_save, evaluate, split_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
DEFAULT_SWEEP = "1e-1,1e-2,1e-3,1e-4,0"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("NDCONV_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_USAGE, f"NDCONV_SEED must be an integer, got {raw!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _int_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN..MAX, got {text!r}") from None
    return lo, hi


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def write_manifest(path, subcommand: str, config: dict, seed, artifacts: dict, **extra) -> dict:
    manifest = {
        **extra,
        "v": 1,
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_scenes(path):
    path = Path(path)
    if not path.is_dir():
        raise CliError(EXIT_USAGE, f"dataset directory not found: {path}")
    scenes = load_dataset(path)
    if not scenes:
        raise CliError(EXIT_USAGE, f"dataset is empty: {path}")
    return scenes


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise CliError(EXIT_USAGE, f"checkpoint not found: {path}")
    return checkpoint_load(path)


def _check_compatible(model_cfg: ModelConfig, image_shape, data_info=None):
    _, c, h, w = image_shape
    if c != model_cfg.in_channels or h < 3 or w < 3:
        info = {"model": model_cfg.to_json(), "data": data_info or {"image_shape": list(image_shape)}}
        raise CliError(EXIT_USAGE, "incompatible checkpoint and data:\n" + json.dumps(info, indent=2, sort_keys=True))


# -- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.scenes <= 0:
        raise CliError(EXIT_USAGE, "empty dataset requested")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(EXIT_USAGE, f"refusing to write into nonempty directory {out} (use --force)")
        for p in out.iterdir():
            if p.name == "manifest.json" or p.name.startswith("scene_"):
                p.unlink()
    cfg = SynthConfig(size=args.size, heads=args.heads, radius=(args.radius_min, args.radius_max),
                      noise=args.noise, seed=args.seed)
    cfg.validate()
    scenes = generate_dataset(cfg, args.scenes)
    save_dataset(out, scenes)
    write_manifest(out / "manifest.json", "synth", cfg.to_json(), args.seed,
                   {"images": "scene_{k}.img", "annotations": "scene_{k}.json"}, scenes=args.scenes)
    print(_dumps({"v": 1, "scenes": args.scenes, "out": str(out)}))
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _warm_start(model, init_path):
    """Copy parameter values (not optimizer state) from a compatible checkpoint."""
    src = _load_checkpoint(init_path).model
    a, b = src.config, model.config
    if (a.widths, a.dilation, a.in_channels) != (b.widths, b.dilation, b.in_channels):
        raise CliError(EXIT_USAGE, "incompatible --init checkpoint:\n" + json.dumps(
            {"init": a.to_json(), "requested": b.to_json()}, indent=2, sort_keys=True))
    for name, p in model.params.items():
        if name in src.params:
            p.value[...] = src.params.value(name)


def _train_run(model, scenes, tcfg, ckpt_path, log_path, state=None, append=False, data_info=None):
    mode = "a" if append else "w"
    with open(log_path, mode) as log_fh:
        def on_log(entry):
            log_fh.write(_dumps({"v": 1, **entry}) + "\n")
            log_fh.flush()

        try:
            result = train(model, scenes, tcfg, state=state, on_log=on_log, checkpoint_path=ckpt_path)
        except NumericalError as exc:
            raise CliError(EXIT_NUMERIC, f"training aborted: {exc}") from None
    checkpoint_save(ckpt_path, result.model, tcfg, result.state, extra={"data": data_info or {}})
    return result


def _train_config(args, lam=None, steps=None) -> TrainConfig:
    return TrainConfig(lam=args.lam if lam is None else lam, lr=args.lr, batch_size=args.batch_size,
                       epochs=args.epochs, seed=args.seed, eval_interval=args.eval_interval,
                       steps=args.steps if steps is None else steps)


def cmd_train(args) -> int:
    scenes = _load_scenes(args.data)
    data_info = load_manifest(args.data).get("config", {})
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    if args.resume:
        ck = _load_checkpoint(args.resume)
        model, state = ck.model, ck.state
        tcfg = ck.train or _train_config(args)
        if args.steps is not None:
            tcfg.steps = args.steps
        append = Path(args.resume).resolve() == out.resolve() and log_path.exists()
    else:
        if args.lam < 0:
            raise CliError(EXIT_USAGE, f"lambda must be nonnegative, got {args.lam}")
        mcfg = ModelConfig(widths=args.widths, dilation=args.dilation, final=args.final, seed=args.seed)
        model = build_model(mcfg)
        if args.init:
            _warm_start(model, args.init)
        tcfg, state, append = _train_config(args), None, False
    tcfg.validate()
    _check_compatible(model.config, scenes[0].image.shape, data_info)
    result = _train_run(model, scenes, tcfg, out, log_path, state, append, data_info)
    write_manifest(out.with_name(out.name + ".manifest.json"), "train",
                   {"model": model.config.to_json(), "train": tcfg.to_json(), "data": str(args.data),
                    "init": args.init, "resume": args.resume},
                   tcfg.seed, {"checkpoint": str(out), "log": str(log_path)})
    print(_dumps({"v": 1, "steps": result.state.step, **(result.log[-1] if result.log else {})}))
    return EXIT_OK


# -- sweep ------------------------------------------------------------------

def _lambda_tag(lam: float) -> str:
    return f"{lam:g}"


def _monotone_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def sweep_summary_markdown(rows: list[dict]) -> str:
    head = "| metric | " + " | ".join(_lambda_tag(r["lambda"]) for r in rows) + " |"
    sep = "|---" * (len(rows) + 1) + "|"
    lines = [head, sep]
    for key in ("mae", "mse", "l_nd_first", "l_nd_last", "residual"):
        cells = ["-" if r[key] is None else f"{r[key]:.4g}" for r in rows]
        lines.append(f"| {key} | " + " | ".join(cells) + " |")
    lines.append("| l_nd decreasing | " + " | ".join("yes" if r["l_nd_decreasing"] else "no" for r in rows) + " |")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    scenes = _load_scenes(args.data)
    data_info = load_manifest(args.data).get("config", {})
    try:
        lambdas = [float(v) for v in args.lambdas.split(",")]
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad --lambdas list {args.lambdas!r}") from None
    if any(lam < 0 for lam in lambdas):
        raise CliError(EXIT_USAGE, "every lambda must be nonnegative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = ModelConfig(widths=args.widths, dilation=args.dilation, final=args.final, seed=args.seed)
    _check_compatible(mcfg, scenes[0].image.shape, data_info)

    start = None
    if args.warmup_steps > 0:
        warm = build_model(mcfg)
        _train_run(warm, scenes, _train_config(args, lam=0.0, steps=args.warmup_steps),
                   out / "warmup.ckpt", out / "warmup.ckpt.log.jsonl", data_info=data_info)
        start = out / "warmup.ckpt"
    elif args.init:
        start = Path(args.init)

    rows, artifacts = [], {}
    for lam in lambdas:
        tag = _lambda_tag(lam)
        model = build_model(mcfg)
        if start is not None:
            _warm_start(model, start)
        tcfg = _train_config(args, lam=lam)
        tcfg.validate()
        ckpt = out / f"lambda_{tag}.ckpt"
        log_path = out / f"lambda_{tag}.ckpt.log.jsonl"
        result = _train_run(model, scenes, tcfg, ckpt, log_path, data_info=data_info)
        last = result.log[-1] if result.log else {}
        l_nd = [e["l_nd"] for e in result.log]
        rows.append({
            "lambda": lam,
            "mae": last.get("mae"),
            "mse": last.get("mse"),
            "l_nd_first": l_nd[0] if l_nd else None,
            "l_nd_last": l_nd[-1] if l_nd else None,
            "l_nd_decreasing": _monotone_decreasing(l_nd),
            "residual": last.get("residual"),
        })
        artifacts[tag] = {"checkpoint": str(ckpt), "log": str(log_path)}
    base_train = _train_config(args, lam=0.0).to_json()
    del base_train["lambda"]  # varies per run
    (out / "summary.json").write_text(json.dumps({"v": 1, "rows": rows}, indent=2, sort_keys=True) + "\n")
    table = sweep_summary_markdown(rows)
    (out / "summary.md").write_text(table)
    write_manifest(out / "manifest.json", "sweep",
                   {"model": mcfg.to_json(), "train": base_train, "lambdas": lambdas,
                    "warmup_steps": args.warmup_steps, "init": args.init, "data": str(args.data)},
                   args.seed, {"runs": artifacts, "summary": str(out / "summary.json")})
    sys.stdout.write(table)
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.ckpt)
    scenes = _load_scenes(args.data)
    data_info = load_manifest(args.data).get("config", {})
    _check_compatible(ck.model.config, scenes[0].image.shape, data_info)
    if args.split != "all":
        train_set, val_set = split_dataset(scenes)
        scenes = train_set if args.split == "train" else val_set
        if not scenes:
            raise CliError(EXIT_USAGE, f"split {args.split!r} is empty for this dataset")
    metrics = evaluate(ck.model, scenes)
    print(_dumps({"v": 1, **metrics.to_dict()}))
    manifest = args.manifest or str(Path(args.ckpt).with_name(Path(args.ckpt).name + ".eval.manifest.json"))
    write_manifest(manifest, "eval", {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split},
                   ck.model.config.seed, {"stdout": "metrics"})
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = run_suite(args.component, range(args.seed, args.seed + args.seeds))
    worst: dict[str, object] = {}
    for r in results:
        key = f"{r.component}.{r.path}"
        if key not in worst or r.max_rel_error > worst[key].max_rel_error:
            worst[key] = r
    failed = []
    for key, r in worst.items():
        ok = r.passed(args.tol)
        print(f"{key:24s} max_rel_err={r.max_rel_error:.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(r)
    manifest = args.manifest or "ndconv-gradcheck.manifest.json"
    write_manifest(manifest, "gradcheck", {"component": args.component, "seeds": args.seeds, "tol": args.tol},
                   args.seed, {"stdout": "report"})
    if failed:
        for r in failed:
            print(f"FAILED {r.component}.{r.path}: seed {r.seed}, coordinate {list(r.worst_index)}, "
                  f"rel err {r.max_rel_error:.3e} > tol {args.tol:g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- export -----------------------------------------------------------------

def cmd_export(args) -> int:
    ck = _load_checkpoint(args.ckpt)
    if not Path(args.image).is_file():
        raise CliError(EXIT_USAGE, f"image not found: {args.image}")
    image = load_tensor(args.image)
    model = ck.model
    n, c, h, w = image.shape
    if n != 1 or c != model.config.in_channels or h < 3 or w < 3:
        raise CliError(EXIT_USAGE, f"image of shape {image.shape} is incompatible with a model expecting "
                                   f"(1, {model.config.in_channels}, h>=3, w>=3)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    density, offsets = model.predict(image)
    if offsets is None:
        offsets = np.zeros((1, 18, h, w))
    positions = sampling_positions(offsets, model.geometry, args.grid_step)
    (out / "offsets.json").write_text(json.dumps(positions) + "\n")
    lo, hi = write_pgm(out / "density.pgm", density[0, 0])
    report = uniformity_report(offsets, model.geometry)
    (out / "uniformity.json").write_text(_dumps({"v": 1, **report.to_dict()}) + "\n")
    count = math.fsum(density.astype(np.float64).ravel())
    write_manifest(out / "manifest.json", "export",
                   {"ckpt": str(args.ckpt), "image": str(args.image), "grid_step": args.grid_step},
                   model.config.seed,
                   {"offsets": "offsets.json", "density": "density.pgm", "uniformity": "uniformity.json"})
    print(_dumps({"v": 1, "predicted_count": count, "density_min": lo, "density_max": hi}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--final", choices=FINAL_KINDS, default="ndconv")
    p.add_argument("--widths", type=_widths, default=(16, 32, 16))
    p.add_argument("--dilation", type=int, default=2)


def _add_train_args(p, seed):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--steps", type=int, default=None, help="total optimizer steps (overrides --epochs)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--eval-interval", type=int, default=20)
    p.add_argument("--seed", type=int, default=seed)


def build_parser(seed: int) -> argparse.ArgumentParser:
    parser = _Parser(prog="ndconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic crowd dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", type=_size, default=(96, 96))
    p.add_argument("--heads", type=_int_range, default=(5, 20))
    p.add_argument("--radius-min", type=float, default=2.5)
    p.add_argument("--radius-max", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a counting model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--log", default=None, help="JSON-lines log (default: <out>.log.jsonl)")
    p.add_argument("--init", default=None, help="warm-start parameter values from a checkpoint")
    p.add_argument("--resume", default=None, help="continue a run saved in this checkpoint")
    _add_model_args(p)
    _add_train_args(p, seed)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per lambda and tabulate the results")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambdas", default=DEFAULT_SWEEP)
    p.add_argument("--warmup-steps", type=int, default=0,
                   help="train a lambda=0 baseline this long first and fine-tune every run from it")
    p.add_argument("--init", default=None, help="fine-tune every run from this checkpoint")
    _add_model_args(p)
    _add_train_args(p, seed)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="print MAE/MSE of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--component", choices=sorted(SUITES), default="all")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="write sampling positions, density PGM and uniformity report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="image tensor file, e.g. scene_0.img")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-step", type=int, default=8)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser(_default_seed())
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"ndconv: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"ndconv: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, NDConvError, OSError) as exc:
        print(f"ndconv: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
