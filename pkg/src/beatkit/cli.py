"""Command-line interface: ``beatkit {synth,train,infer,eval,czt,gradcheck}``.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("beatkit")

SEED_ENV = "BEATKIT_SEED"


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _hr_range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    try:
        out = (float(lo), float(hi))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    if not sep or not 40 <= out[0] <= out[1] <= 150:
        raise argparse.ArgumentTypeError("heart-rate range must satisfy 40 <= LO <= HI <= 150")
    return out


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON file whose keys mirror this command's long flags")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    from .data import MOTION_KINDS
    from .evaluation import METHOD_NAMES
    from .training import MODES

    common = _common()
    parser = _Parser(prog="beatkit", description="Spectral rPPG toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=_positive_int, default=50)
    p.add_argument("--duration", type=_positive_float, default=30.0)
    p.add_argument("--sample-rate", type=_positive_float, default=30.0)
    p.add_argument("--hr-range", type=_hr_range, default=(45.0, 140.0))
    p.add_argument("--motion", choices=MOTION_KINDS, default="mixed")
    p.add_argument("--motion-amplitude", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=0.2)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=MODES, default="scl")
    p.add_argument("--epochs", type=_positive_int, default=20)
    p.add_argument("--batch", type=_positive_int, default=2)
    p.add_argument("--lr", type=_positive_float, default=5e-4)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--sequence-len", type=_positive_int, default=300)
    p.add_argument("--train-stride", type=_positive_int, default=5)
    p.add_argument("--window-len", type=_positive_int, default=150)
    p.add_argument("--num-blocks", type=_positive_int, default=2)
    p.add_argument("--num-heads", type=_positive_int, default=1)
    p.add_argument("--mlp-hidden", type=_positive_int, default=8)
    p.add_argument("--emd-norm", choices=("bins", "batch"), default="bins")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path (.json)")
    p.add_argument("--loss-csv", type=Path, default=None,
                   help="loss history CSV (default: <out stem>_loss.csv)")

    p = sub.add_parser("infer", parents=[common], help="extract a pulse from one trace")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="pulse CSV (frame,pulse)")
    p.add_argument("--no-postprocess", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="windowed heart-rate evaluation")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--method", choices=METHOD_NAMES, required=True)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--report", type=Path, required=True, help="JSON report path")
    p.add_argument("--pairs-csv", type=Path, default=None,
                   help="per-window CSV (default: <report stem>_windows.csv)")
    p.add_argument("--motion", default=None,
                   help="restrict to corpus items of this motion kind ('corrupted' = any motion)")

    p = sub.add_parser("czt", parents=[common], help="dump zoomed spectra of one window")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--window-len", type=_positive_int, default=300)
    p.add_argument("--model", type=Path, default=None,
                   help="also dump per-block energy weights S for the first model window")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the SCL loss")
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    return parser


def _config_defaults(sub: argparse.ArgumentParser, command: str, path: Path) -> dict:
    try:
        overrides = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(overrides, dict):
        raise ValidationError("config file must hold a JSON object")
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    normalized = {k.lstrip("-").replace("-", "_"): v for k, v in overrides.items()}
    unknown = sorted(set(normalized) - set(actions))
    if unknown:
        raise ValidationError(f"unknown config keys for {command}: {unknown}")
    defaults = {}
    for dest, value in normalized.items():
        action = actions[dest]
        if action.type is not None and value is not None:
            if isinstance(value, (list, tuple)):
                value = ":".join(str(v) for v in value)
            try:
                value = action.type(str(value))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ValidationError(f"config key {dest!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ValidationError(f"config key {dest!r} must be one of {list(action.choices)}")
        defaults[dest] = value
    return defaults


def _resolve(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` act as defaults that explicit flags override."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if known.config is not None and command is not None:
        sub = subparsers[command]
        defaults = _config_defaults(sub, command, known.config)
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise ValidationError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return args


def _check_writable(path: Path, force: bool):
    if path.exists() and not force:
        raise ValidationError(f"{path} exists; pass --force to overwrite")


def _jsonable(ns: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(ns).items()}


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    from .data import save_corpus, synth_corpus

    manifest = args.out / "manifest.json"
    _check_writable(manifest, args.force)
    samples = synth_corpus(args.count, duration_s=args.duration, hr_range=args.hr_range,
                           motion=args.motion, seed=args.seed, sample_rate=args.sample_rate,
                           motion_amplitude=args.motion_amplitude, noise_std=args.noise_std)
    path = save_corpus(samples, args.out)
    print(f"wrote {len(samples)} recordings and {path}")


def _load_items(path: Path):
    from .data import FormatError, load_corpus

    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    try:
        return load_corpus(path)
    except (FormatError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def cmd_train(args) -> None:
    from .data import save_checkpoint
    from .model import ModelConfig
    from .training import TrainRunConfig, train

    loss_csv = args.loss_csv or args.out.with_name(args.out.stem + "_loss.csv")
    _check_writable(args.out, args.force)
    _check_writable(loss_csv, args.force)
    items = _load_items(args.data)
    try:
        run = TrainRunConfig(mode=args.mode, epochs=args.epochs, batch_size=args.batch,
                             lr_max=args.lr, alpha=args.alpha, gamma=args.gamma, seed=args.seed,
                             sequence_len=args.sequence_len, train_stride=args.train_stride,
                             emd_norm=args.emd_norm)
        fs = items[0].trace.sample_rate_hz
        model_cfg = ModelConfig(window_len=args.window_len, num_blocks=args.num_blocks,
                                num_heads=args.num_heads, mlp_hidden=args.mlp_hidden,
                                sample_rate_hz=fs)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if any(it.trace.sample_rate_hz != fs for it in items):
        raise ValidationError("all recordings must share one sample rate")
    result = train(items, run, model_cfg, loss_csv=loss_csv)
    save_checkpoint(result.params, result.model_config, result.meta, args.out)
    print(f"best epoch {result.best_epoch} (validation loss {result.best_val_loss:.6g}); "
          f"wrote {args.out} and {loss_csv}")


def _load_model(path: Path):
    from .data import CheckpointError, load_checkpoint

    if path is None:
        raise ValidationError("--model is required for this method")
    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    try:
        return load_checkpoint(path)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise ValidationError(f"invalid checkpoint: {exc}") from None


def _load_single_trace(path: Path):
    from .data import FormatError, load_trace

    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    try:
        return load_trace(path)
    except (FormatError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def cmd_infer(args) -> None:
    from .model import forward
    from .signal import estimate_hr, postprocess

    _check_writable(args.out, args.force)
    params, cfg, _ = _load_model(args.model)
    trace = _load_single_trace(args.trace)
    if trace.sample_rate_hz != cfg.sample_rate_hz:
        raise ValidationError(f"trace rate {trace.sample_rate_hz} Hz differs from the model's "
                              f"{cfg.sample_rate_hz} Hz")
    if len(trace) < cfg.window_len:
        raise ValidationError(f"trace needs at least {cfg.window_len} frames")
    pulse = forward(trace, params, cfg)
    if not args.no_postprocess:
        pulse = postprocess(pulse)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "pulse"])
        for i, v in enumerate(pulse.values):
            writer.writerow([i, repr(float(v))])
    print(f"heart rate {estimate_hr(pulse):.2f} BPM; wrote {args.out}")


def cmd_eval(args) -> None:
    from .evaluation import evaluate_run, method_callable

    pairs_csv = args.pairs_csv or args.report.with_name(args.report.stem + "_windows.csv")
    _check_writable(args.report, args.force)
    _check_writable(pairs_csv, args.force)
    items = _load_items(args.data)
    if args.motion == "corrupted":
        items = [it for it in items if it.motion not in ("none", "unknown")]
    elif args.motion is not None:
        items = [it for it in items if it.motion == args.motion]
    if not items:
        raise ValidationError("no recordings match the selection")
    if any(it.trace.ppg_gt is None for it in items):
        raise ValidationError("evaluation needs ground-truth PPG in every trace")
    params = cfg = None
    if args.method == "beatformer":
        params, cfg, _ = _load_model(args.model)
    report = evaluate_run(method_callable(args.method, params, cfg), items)
    report.config.update(data=str(args.data), model=str(args.model) if args.model else None,
                         motion=args.motion)
    report.write_json(args.report)
    report.write_pairs_csv(pairs_csv)
    rho = "undefined" if report.pearson_rho is None else f"{report.pearson_rho:.3f}"
    print(f"{args.method}: MAE {report.mae_bpm:.2f} RMSE {report.rmse_bpm:.2f} "
          f"MAPE {report.mape_pct:.2f}% rho {rho} over {report.n_windows} windows")


def cmd_czt(args) -> None:
    from .model import forward_many
    from .signal import normalize_trace
    from .spectral import czt, hr_zoom_spec

    _check_writable(args.out, args.force)
    trace = _load_single_trace(args.trace)
    if args.start < 0 or args.start + args.window_len > len(trace):
        raise ValidationError("window lies outside the trace")
    window = trace.crop(args.start, args.window_len)
    c = normalize_trace(window)
    c = c - c.mean(axis=0)
    spec = hr_zoom_spec(trace.sample_rate_hz, args.window_len)
    spectra = [czt(c[:, ch], spec) for ch in range(3)]
    columns = {"bin": np.arange(spec.m), "freq_hz": spec.freqs_hz}
    for name, X in zip("rgb", spectra):
        columns[f"{name}_mag"] = np.abs(X)
        columns[f"{name}_phase"] = np.angle(X)
    if args.model is not None:
        params, cfg, _ = _load_model(args.model)
        if cfg.window_len != args.window_len:
            raise ValidationError(f"--window-len must equal the model window ({cfg.window_len})")
        acts: list = []
        forward_many([window], params, cfg, chunk=None, activations=acts)
        for b, act in enumerate(acts):
            columns[f"block{b}_S"] = act.energy[0, :, 0]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(columns))
        for row in zip(*columns.values()):
            writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    print(f"wrote {spec.m} bins ({spec.f_lo_hz}-{spec.f_hi_hz} Hz) to {args.out}")


def cmd_gradcheck(args) -> int:
    from .training import check_scl_gradients

    result = check_scl_gradients(args.seed)
    ok = result.max_rel_error < args.tol
    print(f"max relative error {result.max_rel_error:.3e} over {result.n_checked} coordinates "
          f"({len(result.degenerate)} on kinks excluded): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "czt": cmd_czt,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _resolve(parser, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print(f"config: {json.dumps(_jsonable(args), sort_keys=True)}", file=sys.stderr)
    try:
        code = COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


def main() -> None:
    sys.exit(run())
