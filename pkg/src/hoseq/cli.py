"""Command-line entry point: synthesize datasets, train, evaluate, and run
gradient checks.

Configuration is a UTF-8 ``key = value`` text file (``#`` comments and blank
lines allowed).  Unknown keys are rejected; every key has a default, and the
fully resolved configuration is echoed (``config.<key>=<value>`` lines on
stdout, plus a reloadable ``config.txt`` for ``train``) so a run can be
reproduced bit-identically from its own output.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 numeric failure.

Setting the environment variable ``HOSEQ_GRADCHECK_FAULT`` makes
``gradcheck`` double one analytic gradient before checking; it exists only so
tests can prove the harness catches a broken backward pass.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff_layers import RngStream, grad_check, load_checkpoint, save_checkpoint
from .common_network import CommonConfig
from .data_io import ModelDims, read_mmseq, synth_generate, write_mmseq
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    HoseqError,
    NumericError,
    UsageError,
)
from .hoseq_model import (
    MODES,
    HoseqConfig,
    backward_batch,
    forward_batch,
    init_params,
    mse_loss,
    mse_loss_grad,
    param_group,
    predict,
    train,
)
from .metrics import compute_report
from .unique_network import UniqueConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4

# Probe step for the CLI harness: balances float64 roundoff (dominant below
# ~1e-5 on near-dead relu paths) against kink-crossing truncation (above ~1e-4).
GRADCHECK_EPSILON = 3e-5

# CLI spellings for the ablation modes.
_MODE_ALIASES = {"full": "full", "common": "common_only", "unique": "unique_only"}


# ---------------------------------------------------------------------------
# configuration file handling


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected 'true' or 'false', got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _parse_mode(text: str) -> str:
    if text not in MODES:
        raise ValueError(f"expected one of {MODES}, got {text!r}")
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default); order here is the canonical echo order
CONFIG_KEYS: dict[str, tuple] = {
    "mode": (_parse_mode, "full"),
    "seed": (int, 0),
    "learning_rate": (float, 6e-3),
    "batch_size": (int, 256),
    "max_epochs": (int, 30),
    "patience": (int, 5),
    "batchnorm": (_parse_bool, False),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "fused_dim": (int, 8),
    "common.lstm_hidden": (int, 5),
    "common.latent_dim": (int, 5),
    "common.conv_kernel": (int, 2),
    "common.conv_stride": (int, 1),
    "common.num_filters": (int, 2),
    "common.fc_widths": (_parse_int_list, (16, 8)),
    "common.dropout_rate": (float, 0.1),
    "unique.latent_dim": (int, 5),
    "unique.conv_kernel": (int, 2),
    "unique.conv_stride": (int, 1),
    "unique.num_filters": (int, 2),
    "unique.step_fc_width": (int, 16),
    "unique.pool_fc_width": (int, 8),
    "unique.dropout_rate": (float, 0.1),
    "unique.share_step_weights": (_parse_bool, True),
}


def parse_config_file(path) -> dict[str, str]:
    """Read raw ``key = value`` lines; unknown keys are rejected."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str], overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Apply defaults and parse values into a typed mapping."""
    resolved: dict[str, object] = {}
    for key, (parse, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                resolved[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"configuration key {key!r}: {exc}") from None
        else:
            resolved[key] = default
    if overrides:
        resolved.update(overrides)
    return resolved


def config_lines(resolved: dict[str, object]) -> list[str]:
    return [f"{key}={_format_value(resolved[key])}" for key in CONFIG_KEYS]


def build_hoseq_config(resolved: dict[str, object]) -> HoseqConfig:
    common = CommonConfig(
        lstm_hidden=resolved["common.lstm_hidden"],
        latent_dim=resolved["common.latent_dim"],
        conv_kernel=resolved["common.conv_kernel"],
        conv_stride=resolved["common.conv_stride"],
        num_filters=resolved["common.num_filters"],
        fc_widths=resolved["common.fc_widths"],
        dropout_rate=resolved["common.dropout_rate"],
    )
    unique = UniqueConfig(
        latent_dim=resolved["unique.latent_dim"],
        conv_kernel=resolved["unique.conv_kernel"],
        conv_stride=resolved["unique.conv_stride"],
        num_filters=resolved["unique.num_filters"],
        step_fc_width=resolved["unique.step_fc_width"],
        pool_fc_width=resolved["unique.pool_fc_width"],
        dropout_rate=resolved["unique.dropout_rate"],
        share_step_weights=resolved["unique.share_step_weights"],
    )
    config = HoseqConfig(
        common=common,
        unique=unique,
        fused_dim=resolved["fused_dim"],
        mode=resolved["mode"],
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        max_epochs=resolved["max_epochs"],
        patience=resolved["patience"],
        seed=resolved["seed"],
        batchnorm=resolved["batchnorm"],
        adam_beta1=resolved["adam_beta1"],
        adam_beta2=resolved["adam_beta2"],
        adam_eps=resolved["adam_eps"],
    )
    config.validate()
    return config


def _load_resolved(args, overrides: dict[str, object]) -> dict[str, object]:
    raw = parse_config_file(args.config) if args.config else {}
    return resolve_config(raw, overrides)


def _echo_config(resolved: dict[str, object]) -> None:
    for line in config_lines(resolved):
        print(f"config.{line}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    overrides: dict[str, object] = {}
    if args.mode is not None:
        overrides["mode"] = _MODE_ALIASES[args.mode]
    if args.seed is not None:
        overrides["seed"] = args.seed
    resolved = _load_resolved(args, overrides)
    config = build_hoseq_config(resolved)
    train_set = read_mmseq(args.train, split="train")
    val_set = read_mmseq(args.val, split="validation")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(resolved)
    store, history = train(train_set, val_set, config)
    save_checkpoint(store, out_dir / "checkpoint.bin")
    (out_dir / "history.tsv").write_text(history.to_table(), encoding="utf-8")
    (out_dir / "config.txt").write_text(
        "\n".join(config_lines(resolved)) + "\n", encoding="utf-8"
    )
    best = history.records[history.best_epoch - 1] if history.records else None
    print(f"epochs_run={len(history.records)}")
    print(f"best_epoch={history.best_epoch}")
    print(f"best_val_mae={best.val_mae!r}" if best else "best_val_mae=nan")
    print(f"stopped_early={'true' if history.stopped_early else 'false'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = _load_resolved(args, {})
    config = build_hoseq_config(resolved)
    dataset = read_mmseq(args.data, split="test")
    store = init_params(config, dataset.dims)
    load_checkpoint(store, args.checkpoint)
    _echo_config(resolved)
    preds = predict(dataset, store, config)
    report = compute_report(preds, dataset.labels)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    dataset = synth_generate(
        n=args.n,
        t_k=args.tk,
        d_l=args.dl,
        d_v=args.dv,
        d_a=args.da,
        async_fraction=args.async_fraction,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    write_mmseq(dataset, args.out)
    t_k, d_l, d_v, d_a = dataset.dims
    print(f"n={len(dataset)}")
    print(f"t_k={t_k}")
    print(f"d_l={d_l}")
    print(f"d_v={d_v}")
    print(f"d_a={d_a}")
    return EXIT_OK


def _gradcheck_fns(train_arrays, labels, config):
    """Deterministic forward+backward closure for grad_check, plus the
    matching forward-only loss used for the finite-difference probes."""
    language, visual, acoustic = train_arrays
    fault = bool(os.environ.get("HOSEQ_GRADCHECK_FAULT"))

    def loss_fn(s):
        preds, _ = forward_batch(
            language, visual, acoustic, s, config, training=True, dropout_rng=None
        )
        return mse_loss(preds, labels)

    def model_fn(s):
        s.zero_grads()
        preds, cache = forward_batch(
            language, visual, acoustic, s, config, training=True, dropout_rng=None
        )
        loss = mse_loss(preds, labels)
        backward_batch(mse_loss_grad(preds, labels), cache, s, config)
        if fault:
            s[s.names()[0]].grad *= 2.0
        return loss

    return model_fn, loss_fn


def cmd_gradcheck(args) -> int:
    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    resolved = _load_resolved(args, overrides)
    if resolved["common.dropout_rate"] > 0 or resolved["unique.dropout_rate"] > 0:
        resolved["common.dropout_rate"] = 0.0
        resolved["unique.dropout_rate"] = 0.0
        print("note=dropout disabled for gradient check")
    config = build_hoseq_config(resolved)
    _echo_config(resolved)
    toy = synth_generate(
        n=2,
        t_k=args.tk,
        d_l=args.dl,
        d_v=args.dv,
        d_a=args.da,
        async_fraction=0.5,
        noise_sigma=0.1,
        seed=config.seed,
    )
    arrays = (toy.language, toy.visual, toy.acoustic)
    modes = MODES if args.mode == "all" else (_MODE_ALIASES[args.mode],)
    worst = 0.0
    for mode in modes:
        mode_config = build_hoseq_config({**resolved, "mode": mode})
        store = init_params(mode_config, toy.dims)
        model_fn, loss_fn = _gradcheck_fns(arrays, toy.labels, mode_config)
        report = grad_check(model_fn, store, epsilon=GRADCHECK_EPSILON, loss_fn=loss_fn)
        groups: dict[str, float] = {}
        for name, err in report.per_param.items():
            key = param_group(name)
            groups[key] = max(groups.get(key, 0.0), err)
        for key in sorted(groups):
            print(f"{mode}.{key}={groups[key]:.3e}")
        print(f"{mode}.max={report.max_error:.3e}")
        worst = max(worst, report.max_error)
    print(f"tolerance={GRADCHECK_TOLERANCE:.0e}")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing


class _ArgumentParser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this CLI reserves 2 for
    data errors, so remap parser errors to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="hoseq", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on MMSEQ data")
    p.add_argument("--train", required=True, help="training-set MMSEQ file")
    p.add_argument("--val", required=True, help="validation-set MMSEQ file")
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--mode", choices=sorted(_MODE_ALIASES), default=None,
                   help="override the configured ablation mode")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, printing all metrics")
    p.add_argument("--data", required=True, help="MMSEQ file to evaluate on")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic MMSEQ dataset")
    p.add_argument("--out", required=True, help="output MMSEQ path")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--tk", type=int, default=8)
    p.add_argument("--dl", type=int, default=6)
    p.add_argument("--dv", type=int, default=4)
    p.add_argument("--da", type=int, default=5)
    p.add_argument("--async-fraction", dest="async_fraction", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference check of all analytic gradients on a 2-instance toy problem",
    )
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--mode", choices=sorted(_MODE_ALIASES) + ["all"], default="all")
    p.add_argument("--tk", type=int, default=4, help="toy sequence length")
    p.add_argument("--dl", type=int, default=6, help="toy language feature dim")
    p.add_argument("--dv", type=int, default=4, help="toy visual feature dim")
    p.add_argument("--da", type=int, default=5, help="toy acoustic feature dim")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help or usage error
        return int(exc.code or 0)
    except (ConfigError, UsageError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    except (DataError, DimensionError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except HoseqError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
