"""Command-line entry point.

Every subcommand reads an optional YAML/JSON config file; ``--set key.path=value``
flags override single fields.  Failures print one line ``error[<category>]: <message>``
to stderr and exit with 2 (config), 3 (data), 4 (numeric) or 5 (acceptance check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any

import yaml

from .data import DataError, SynthConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4, 5


class ConfigError(Exception):
    pass


class AcceptanceFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- config handling ------------------------------------------------------------


def load_config_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{line}: {getattr(exc, 'problem', None) or exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_overrides(cfg: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars or lists."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {key}: cannot parse {raw!r}") from exc
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {part} is not a section")
        node[parts[-1]] = value
    return cfg


def build(cls, values: dict[str, Any], where: str = ""):
    """Instantiate a config dataclass, naming unknown or invalid fields."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {where or cls.__name__} field(s): {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def run_config(values: dict[str, Any]):
    from .engine import DataConfig, RunConfig, ScheduleConfig
    from .layers import GrlConfig
    from .losses import LossConfig
    from .model import DannConfig, StemConfig

    values = dict(values)
    model = dict(values.pop("model", {}) or {})
    if "stem" in model:
        model["stem"] = build(StemConfig, dict(model["stem"]), "model.stem")
    if "grl" in model:
        model["grl"] = build(GrlConfig, dict(model["grl"]), "model.grl")
    data = dict(values.pop("data", {}) or {})
    if "synth" in data:
        data["synth"] = build(SynthConfig, dict(data["synth"]), "data.synth")
    parts = {
        "model": build(DannConfig, model, "model"),
        "loss": build(LossConfig, dict(values.pop("loss", {}) or {}), "loss"),
        "schedule": build(ScheduleConfig, dict(values.pop("schedule", {}) or {}), "schedule"),
        "data": build(DataConfig, data, "data"),
    }
    return build(RunConfig, {**values, **parts}, "run")


def _load(args) -> dict[str, Any]:
    values = load_config_file(args.config) if args.config else {}
    return apply_overrides(values, args.set)


def _echo(cfg_dict: dict[str, Any], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n")


def _emit(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .data import compute_stats, generate_synthetic, write_manifest

    values = _load(args)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = build(SynthConfig, values, "synth")
    manifest = generate_synthetic(cfg)
    compute_stats(manifest, "train")
    out = Path(args.out)
    path = write_manifest(manifest, out)
    _echo(dataclasses.asdict(cfg), out)
    print(json.dumps({"manifest": str(path), "records": len(manifest)}))
    return EXIT_OK


def _run_cfg(args, **extra):
    values = _load(args)
    for key, val in extra.items():
        if val is not None:
            values[key] = val
    return run_config(values)


def cmd_train(args) -> int:
    from .engine import train

    cfg = _run_cfg(args, seed=args.seed, mode=args.mode, output_dir=args.out)
    if cfg.output_dir is None:
        raise ConfigError("train needs --out or output_dir in the config")
    res = train(cfg)
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": res.steps,
                      "target_cell_acc": res.final_eval.get("target_cell_acc")}))
    return EXIT_OK


def cmd_suite(args) -> int:
    from .engine import run_suite

    cfg = _run_cfg(args, seed=args.seed, mode=args.mode, output_dir=args.out)
    if cfg.output_dir is None:
        raise ConfigError("suite needs --out or output_dir in the config")
    _echo(cfg.to_dict(), Path(cfg.output_dir))
    summary = run_suite(cfg, args.runs, with_gap=args.gap)
    print(json.dumps({"summary": str(Path(cfg.output_dir) / f"suite_{cfg.mode}.json"),
                      "median_target_cell_acc": summary["target_cell_acc"]["median"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .engine import evaluate

    metrics = evaluate(args.checkpoint, args.split, args.manifest)
    if args.out:
        _echo({"checkpoint": str(args.checkpoint), "split": args.split, "manifest": args.manifest},
              Path(args.out).parent)
    _emit(metrics, args.out)
    return EXIT_OK


def _features(args):
    """Stem features of one split, using the data pipeline recorded in the checkpoint."""
    import numpy as np

    from .analysis import EmbeddingSet, extract_features
    from .data import Manifest
    from .engine import RunConfig, prepare_data
    from .model import load_checkpoint

    model, header, _ = load_checkpoint(args.checkpoint)
    run = RunConfig(**header["extra"]["run_config"])
    if args.manifest:
        run.data.manifest = args.manifest
    bundle = prepare_data(run)
    parts = {"train": bundle.train_x, "test": bundle.test_x}
    splits = ("train", "test") if args.split == "all" else (args.split,)
    x = np.concatenate([parts[s] for s in splits])
    records = Manifest([r for s in splits for r in bundle.manifest.subset(s).records])
    if not len(x):
        raise DataError(f"split {args.split!r} is empty")
    feats = extract_features(model, images=x).features
    y_cell, y_domain = records.labels()
    return EmbeddingSet(feats, records.datasets(), y_cell, y_domain)


def cmd_embed(args) -> int:
    from .analysis import TsneConfig, export_embedding, tsne

    values = _load(args)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = build(TsneConfig, values, "tsne")
    emb = _features(args)
    res = tsne(emb, cfg)
    path = export_embedding(res.embedding, emb, args.out)
    _echo({"tsne": dataclasses.asdict(cfg), "checkpoint": str(args.checkpoint), "split": args.split},
          path.parent)
    print(json.dumps({"embedding": str(path), "rows": len(emb.y_domain),
                      "final_kl": res.kl_history[max(res.kl_history)]}))
    return EXIT_OK


def cmd_gap(args) -> int:
    from .analysis import domain_gap

    values = _load(args)
    unknown = sorted(set(values) - {"k", "folds", "seed"})
    if unknown:
        raise ConfigError(f"unknown gap field(s): {', '.join(unknown)}")
    emb = _features(args)
    report = domain_gap(emb, k=values.get("k", 5), folds=values.get("folds", 5), seed=values.get("seed", 0))
    if args.out:
        _echo({"checkpoint": str(args.checkpoint), "split": args.split, **values}, Path(args.out).parent)
    _emit(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck

    report = run_gradcheck(args.seed or 0, args.threshold)
    print(f"max relative error {report['max_relative_error']:.3e} ({len(report['per_case'])} cases, "
          f"{report['seconds']:.1f}s); grl contract {'ok' if all(report['grl'].values()) else 'BROKEN'}")
    if args.out:
        _emit(report, args.out)
    if not report["passed"]:
        raise AcceptanceFailure(f"gradient check failed: max relative error {report['max_relative_error']:.3e}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mitodann", description="Domain-adversarial mitosis classifier toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML or JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config field (dotted path); repeatable")
        return p

    p = common(sub.add_parser("synth", help="generate the synthetic two-domain patch set"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("suite", cmd_suite, "train several seeds and aggregate")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=("dann", "baseline"))
        if name == "suite":
            p.add_argument("--runs", type=int, default=5)
            p.add_argument("--gap", action="store_true", help="also measure the kNN domain gap per run")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("embed", cmd_embed, "t-SNE of stem features, exported as CSV"),
                                 ("gap", cmd_gap, "kNN domain gap of stem features")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
        p.add_argument("--manifest")
        p.add_argument("--out", required=(name == "embed"))
        if name == "embed":
            p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference suite and reversal-layer contract")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .engine import NumericError
    from .model import CheckpointError

    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except NumericError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except AcceptanceFailure as exc:
        return _fail("acceptance", exc, EXIT_ACCEPTANCE)


def _fail(category: str, exc: Exception, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
