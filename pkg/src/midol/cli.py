"""Command-line entry point: ``midol <subcommand> [options]``.

Subcommands: ``verify-identities``, ``gradcheck``, ``train``, ``evaluate``
and ``ablate``. Training configuration comes from an optional flat
``key=value`` file, overridden by command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from midol import __version__, gradsuite, infodecomp
from midol.trainer import TrainConfig, eval_data, evaluate, export_all, load_state, run_training, write_routing

log = logging.getLogger("midol")

IDENTITY_TOLERANCE = 1e-10
XOR_TOLERANCE = 1e-12

# Table 2 rows: (label, enable_moe, enable_route, enable_cst)
ABLATION_ROWS = (
    ("row1_baseline", False, False, False),
    ("row2_moe", True, False, False),
    ("row3_moe_route", True, True, False),
    ("row4_full", True, True, True),
)

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


def _convert(key: str, raw, kind: type):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        value = float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    if not math.isfinite(value):
        raise ConfigError(f"{key}: value must be finite, got {raw!r}")
    return value


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then file values, then ``overrides``; validated."""
    types = TrainConfig.field_types()
    merged: dict = {}
    if path is not None:
        merged.update(read_config_file(path))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(types))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _convert(k, v, types[k]) for k, v in merged.items()}
    config = TrainConfig(**values)
    try:
        return config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _flag_overrides(args) -> dict:
    out = {}
    for f in fields(TrainConfig):
        if f.name.startswith("enable_"):
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            out[f.name] = value
    for name in ("moe", "route", "cst"):
        if getattr(args, f"no_{name}", False):
            out[f"enable_{name}"] = False
    return out


def config_from_args(args) -> TrainConfig:
    return parse_config(args.config, _flag_overrides(args))


# ----------------------------------------------------------------------
# run directories
# ----------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _write_json_atomic(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def make_run_dir(root, subcommand: str) -> Path:
    root = Path(root)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = root / f"{stamp}-{subcommand}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}.{k}")
        k += 1
    path.mkdir(parents=True)
    return path


class Manifest:
    """``manifest.json``: written when the run starts, rewritten when it ends."""

    def __init__(self, run_dir: Path, subcommand: str, config: TrainConfig | None):
        self.path = run_dir / "manifest.json"
        self.doc = {
            "subcommand": subcommand,
            "version": __version__,
            "seed": config.seed if config else None,
            "config": asdict(config) if config else None,
            "started": _now(),
            "finished": None,
            "status": "running",
            "artifacts": {},
        }
        _write_json_atomic(self.path, self.doc)

    def finish(self, status: str, artifacts: dict) -> None:
        self.doc.update(finished=_now(), status=status, artifacts=artifacts)
        _write_json_atomic(self.path, self.doc)


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_verify_identities(args) -> int:
    report = infodecomp.identity_sweep(args.tables, args.max_card, args.seed)
    xor = infodecomp.trivariate_mi(infodecomp.xor_table())
    worst = max(v for k, v in report.items() if k.startswith("max_abs_residual"))
    report["xor_i_xyz"] = xor
    report["pass"] = bool(worst < IDENTITY_TOLERANCE and abs(xor + math.log(2)) < XOR_TOLERANCE)
    _emit(report)
    return 0 if report["pass"] else 1


def cmd_gradcheck(args) -> int:
    rows = gradsuite.run_suite(args.seed, args.points)
    for row in rows:
        _emit(row)
    return 0 if all(r["pass"] for r in rows) else 1


def _train_into(config: TrainConfig, run_dir: Path, args, subcommand: str) -> dict:
    manifest = Manifest(run_dir, subcommand, config)
    try:
        result = run_training(
            config,
            run_dir,
            dump_routing=getattr(args, "dump_routing", None),
            dump_data=getattr(args, "dump_data", None),
        )
    except Exception:
        manifest.finish("failed", {})
        raise
    manifest.finish("ok", result.paths)
    return result.evaluation


def cmd_train(args) -> int:
    config = config_from_args(args)
    run_dir = make_run_dir(args.out, "train")
    final = _train_into(config, run_dir, args, "train")
    _emit({"run_dir": str(run_dir), **final})
    return 0


def cmd_evaluate(args) -> int:
    state, config = load_state(args.checkpoint)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    data = eval_data(config)
    report = evaluate(state, config, data)
    if args.export_dir:
        Path(args.export_dir).mkdir(parents=True, exist_ok=True)
        export_all(state, data, args.export_dir)
    if args.dump_routing:
        write_routing(args.dump_routing, state, data)
    _emit(report)
    return 0


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    root = make_run_dir(args.out, "ablate")
    manifest = Manifest(root, "ablate", base)
    rows = []
    for label, moe, route, cst in ABLATION_ROWS:
        config = replace(base, enable_moe=moe, enable_route=route, enable_cst=cst)
        sub = root / label
        sub.mkdir()
        log.info("ablation %s", label)
        final = _train_into(config, sub, argparse.Namespace(), "train")
        rows.append({"row": label, "enable_moe": moe, "enable_route": route, "enable_cst": cst, **final})
    comparison = root / "comparison.json"
    _write_json_atomic(comparison, {"seed": base.seed, "rows": rows})
    manifest.finish("ok", {"comparison": str(comparison), **{r["row"]: str(root / r["row"]) for r in rows}})
    _emit({"run_dir": str(root), "rows": rows})
    return 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--out", default=os.environ.get("MIDOL_OUT", "runs"), help="run root (env MIDOL_OUT)")
    p.add_argument("--dump-routing", metavar="PATH", help="CSV of final teacher routing on the eval set")
    p.add_argument("--dump-data", metavar="PATH", help="CSV of the first training batch")
    p.add_argument("--no-moe", action="store_true", help="single projection head, whole-batch contrastive loss")
    p.add_argument("--no-route", action="store_true", help="disable the routing-consistency loss")
    p.add_argument("--no-cst", action="store_true", help="disable the intra-modality contrastive loss")
    for f in fields(TrainConfig):
        if f.name.startswith("enable_"):
            continue
        kind = type(f.default)
        p.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            type=kind,
            default=None,
            metavar=kind.__name__.upper(),
            help=f"default {f.default}",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"midol {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("verify-identities", help="check the decomposition identities on random tables")
    p.add_argument("--tables", type=int, default=1000)
    p.add_argument("--max-card", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_identities)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over primitives and losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=gradsuite.DEFAULT_POINTS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    p.add_argument("checkpoint", metavar="CHECKPOINT")
    p.add_argument("--seed", type=int, default=None, help="evaluation data seed (default: the run's seed)")
    p.add_argument("--export-dir", metavar="DIR", help="write embedding CSVs here")
    p.add_argument("--dump-routing", metavar="PATH")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the four ablation rows with one seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"midol: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
