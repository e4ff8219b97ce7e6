"""``oodcl`` command line: gen-data, train, eval, compare.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from oodcl.config import TRAIN_VARIANTS, RunConfig
from oodcl.errors import ConfigError, OODCLError
from oodcl.experiment import (
    compare_table,
    evaluate_model,
    generate_datasets,
    load_datasets,
    needs_aux,
    to_json,
    train_variant,
    write_datasets,
)
from oodcl.prototypes import ScoreFunction
from oodcl.trainer import TrainedModel, write_history

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("oodcl")


def _load_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "out", None):
        overrides["output.dir"] = str(Path(args.out).resolve())
    return RunConfig.load(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path("output.dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _score(cfg: RunConfig, name: str | None) -> ScoreFunction:
    return cfg.score_function(name)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    data_dir = cfg.path("data.dir")
    try:
        written = write_datasets(generate_datasets(cfg), data_dir)
    except OSError as exc:
        raise ConfigError(f"data.dir: cannot write to {data_dir}: {exc.strerror}") from None
    for path, n in written:
        print(f"{path}\t{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    variant = args.variant
    try:
        data = load_datasets(cfg, need_aux=needs_aux(variant))
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    model = train_variant(cfg, variant, data)
    out = _out_dir(cfg)
    ckpt = out / f"{variant}.ckpt"
    model.save(ckpt)
    write_history(model.history, out / f"{variant}.history.tsv")
    print(ckpt)
    return EXIT_OK


def _checkpoint(path: Path) -> TrainedModel:
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return TrainedModel.load(path)


def _eval_one(cfg: RunConfig, ckpt: Path, score: ScoreFunction, data) -> dict:
    model = _checkpoint(ckpt)
    return evaluate_model(cfg, model, data, model.kind, score)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    score = _score(cfg, args.score)
    try:
        data = load_datasets(cfg, need_aux=False)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    ckpt = Path(args.checkpoint)
    report = _eval_one(cfg, ckpt, score, data)
    out = Path(args.report) if args.report else _out_dir(cfg) / f"{ckpt.stem}.{score.value}.json"
    out.write_text(to_json(report) + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    score = _score(cfg, args.score)
    variants = args.variants.split(",") if args.variants else cfg.compare_variants()
    for v in variants:
        if v not in TRAIN_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    try:
        data = load_datasets(cfg, need_aux=False)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(cfg)
    reports = {v: _eval_one(cfg, out / f"{v}.ckpt", score, data) for v in variants}
    table = compare_table(reports)
    (out / f"compare.{score.value}.txt").write_text(table, encoding="utf-8")
    (out / f"compare.{score.value}.json").write_text(to_json(reports) + "\n", encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")

    p = sub.add_parser("gen-data", help="write ID train/test and OOD dataset files")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant and write its checkpoint")
    common(p)
    p.add_argument("--variant", required=True, choices=TRAIN_VARIANTS)
    p.set_defaults(func=cmd_train)

    scores = [f.value for f in ScoreFunction]
    p = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--score", choices=scores, default=None)
    p.add_argument("--report", default=None, help="report path (default: <out>/<ckpt>.<score>.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="side-by-side table of trained variants")
    common(p)
    p.add_argument("--score", choices=scores, default=None)
    p.add_argument("--variants", default=None, help="comma-separated (default: compare.variants)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"oodcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OODCLError, ArithmeticError, OSError) as exc:
        print(f"oodcl: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
