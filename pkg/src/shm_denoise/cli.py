"""``shm-denoise`` command line.

Exit codes: 0 success, 1 config/usage, 2 I/O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checks import format_table, run_suite
from .config import ConfigValidationError, load_document, resolve
from .dataprep import DataError
from .evalrep import AttentionDisabledError, evaluate, export_attention
from .layers import ConfigError
from .pipeline import load_data, prepare
from .signalgen import SignalError, save_csv
from .tensor import NonFiniteError, ShapeError
from .train import (FORMAT_VERSION, CheckpointError, DivergenceError, fit, load_checkpoint,
                    save_checkpoint)

log = logging.getLogger("shm_denoise")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}", EXIT_IO) from None
    return out


def _provenance(command: str, doc: dict) -> dict:
    return {
        "command": command,
        "package_version": __version__,
        "checkpoint_format_version": FORMAT_VERSION,
        "seed": doc["seed"],
        "config": doc,
    }


def _config(args, input_channels: int | None = None):
    doc = load_document(args.config, args.set or [])
    return doc, resolve(doc, input_channels)


def _dataset(cfg):
    try:
        return load_data(cfg)
    except OSError as e:
        raise CliError(f"cannot read data: {e}", EXIT_IO) from None
    except SignalError as e:
        raise CliError(f"bad data file: {e}", EXIT_IO) from None


def _resolved_with_data(args):
    """Resolve config; when CSVs are supplied, size the model from their channel count."""
    doc, cfg = _config(args)
    ds = _dataset(cfg)
    if ds.noisy.channels != cfg.model.input_channels:
        cfg = resolve(doc, ds.noisy.channels)
    return doc, cfg, ds


def cmd_generate(args) -> int:
    doc, cfg = _config(args)
    out = _out_dir(args)
    ds = load_data(cfg)
    try:
        save_csv(ds.clean, out / "clean.csv")
        save_csv(ds.noisy, out / "noisy.csv")
        _write_json(out / "provenance.json", _provenance("generate", doc))
    except OSError as e:
        raise CliError(f"cannot write output: {e}", EXIT_IO) from None
    print(f"wrote {out / 'clean.csv'} and {out / 'noisy.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc, cfg, ds = _resolved_with_data(args)
    out = _out_dir(args)
    try:
        prep = prepare(cfg, ds)
    except DataError as e:
        raise CliError(f"data: {e}", EXIT_CONFIG) from None

    def progress(epoch, tr, va):
        log.info("epoch %d train %.6g val %.6g", epoch, tr, va)

    try:
        ckpt, report = fit(prep.windows["train"], prep.windows["val"], cfg.train, cfg.model, prep.norm,
                           on_epoch=progress)
    except DivergenceError as e:
        if e.report is not None:
            _write_json(out / "train_report.json", e.report.to_dict())
        raise CliError(f"training diverged: {e}", EXIT_NUMERIC) from None
    try:
        save_checkpoint(ckpt, out / "model.shmd")
        _write_json(out / "train_report.json", report.to_dict())
        _write_json(out / "config.json", doc)
        _write_json(out / "provenance.json", _provenance("train", doc))
    except OSError as e:
        raise CliError(f"cannot write output: {e}", EXIT_IO) from None
    print(f"stopped at epoch {report.stopped_epoch} ({report.stop_reason}); "
          f"best epoch {report.best_epoch}, val loss {report.best_val_loss:.6g}")
    return EXIT_OK


def _checkpoint(args, out: Path):
    path = Path(args.checkpoint) if args.checkpoint else out / "model.shmd"
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CliError(f"cannot read checkpoint: {e}", EXIT_IO) from None
    except CheckpointError as e:
        raise CliError(f"bad checkpoint {path}: {e}", EXIT_IO) from None


def _eval_windows(args, out: Path):
    doc, cfg, ds = _resolved_with_data(args)
    ckpt = _checkpoint(args, out)
    stored = ckpt.net_config
    if ds.noisy.channels != stored.input_channels or cfg.data["window"] != stored.window:
        raise ShapeError(f"checkpoint expects windows {(stored.window, stored.input_channels)}, "
                         f"data gives {(cfg.data['window'], ds.noisy.channels)}")
    try:
        prep = prepare(cfg, ds, norm=ckpt.norm)
    except DataError as e:
        raise CliError(f"data: {e}", EXIT_CONFIG) from None
    return ckpt, prep.windows[cfg.eval.get("split", "test")], cfg


def cmd_eval(args) -> int:
    out = _out_dir(args)
    ckpt, windows, cfg = _eval_windows(args, out)
    report = evaluate(ckpt, windows)
    try:
        report.save(out / cfg.eval["metrics"])
    except OSError as e:
        raise CliError(f"cannot write metrics: {e}", EXIT_IO) from None
    print(f"rmse {report.rmse:.6g}  mae {report.mae:.6g}  "
          f"persistence rmse {report.baselines['persistence']['rmse']:.6g}")
    return EXIT_OK


def cmd_attention(args) -> int:
    out = _out_dir(args)
    ckpt, windows, cfg = _eval_windows(args, out)
    try:
        export_attention(ckpt, windows, out / cfg.eval["attention"])
    except OSError as e:
        raise CliError(f"cannot write attention dump: {e}", EXIT_IO) from None
    print(f"wrote {out / cfg.eval['attention']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    doc = load_document(args.config, args.set or [])
    seed = doc["seed"]
    rows = run_suite(seeds=range(seed, seed + args.seeds))
    print(format_table(rows))
    ok = all(r.passed for r in rows)
    print(f"{sum(r.passed for r in rows)}/{len(rows)} checks passed")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shm-denoise", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment JSON (defaults to the built-in bench)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one field, e.g. train.max_epochs=5 (repeatable)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint for eval/attention (default <out>/model.shmd)")
    p.add_argument("--seeds", type=int, default=5, help="gradcheck: number of seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigValidationError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AttentionDisabledError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as e:
        print(f"shape mismatch: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, DivergenceError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
