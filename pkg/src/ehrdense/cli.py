"""Command-line entry point: ``ehrdense <subcommand>`` or ``python -m ehrdense``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evalkit import MULTI, SINGLE, RunResult, dissect, format_table, load_run, setting_metrics
from .generation import GenerationError
from .pairgen import SOURCES, dataset_stats, load_pairs
from .pipeline import STAGE2_TYPES, Pipeline, PipelineError, ablation_variants, load_config

log = logging.getLogger("ehrdense")

SETTINGS = {"single": SINGLE, "multi": MULTI}
AXES = {"match": "match_type", "query": "query_type"}


def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise PipelineError("config", f"--set expects section.option=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _pipeline(args) -> Pipeline:
    overrides = _parse_overrides(args.set)
    if args.run_dir is not None:
        overrides["run.dir"] = str(Path(args.run_dir).resolve())
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.jobs is not None:
        overrides["run.jobs"] = str(args.jobs)
    return Pipeline(load_config(args.config, overrides), resume=not args.fresh)


def _latest_encoder(p: Pipeline) -> Path:
    for name in ("encoder_stage2.bin", "encoder_stage1.bin"):
        if (p.run_dir / name).is_file():
            return p.run_dir / name
    raise PipelineError("eval", f"no trained encoder in {p.run_dir}; run 'train' first or pass --encoder")


# -- subcommands -----------------------------------------------------------------


def cmd_chunk(args) -> int:
    p = _pipeline(args)
    print(f"{len(p.chunk())} chunks -> {p.run_dir / 'chunks.jsonl'}")
    return 0


def cmd_match(args) -> int:
    print(f"mentions -> {_pipeline(args).match()}")
    return 0


def cmd_abbrev(args) -> int:
    p = _pipeline(args)
    table = p.abbrev()
    print(f"{sum(len(v) for v in table.values())} cleaned pairs -> {p.run_dir / 'abbreviations.jsonl'}")
    return 0


def cmd_pairs(args) -> int:
    p = _pipeline(args)
    sets = p.pairs(args.stage)
    print(dataset_stats(sets).format())
    return 0


def cmd_train(args) -> int:
    p = _pipeline(args)
    p.train_stage(args.stage)
    print(f"encoder -> {p.run_dir / f'encoder_stage{args.stage}.bin'}")
    return 0


def cmd_eval(args) -> int:
    from .encoder import TextEncoder

    p = _pipeline(args)
    path = Path(args.encoder) if args.encoder else _latest_encoder(p)
    if not path.is_file():
        raise PipelineError("eval", f"encoder not found: {path}")
    setting = SETTINGS[args.setting]
    result = p.evaluate(TextEncoder.load(path), [setting])[setting]
    print(format_table(f"{args.setting}-patient", {"overall": result.macro()}, result.metrics))
    print(f"run -> {p.run_dir / f'run_{setting}.tsv'}")
    return 0


def cmd_dissect(args) -> int:
    p = _pipeline(args)
    setting = SETTINGS[args.setting]
    run_path = Path(args.run) if args.run else p.run_dir / f"run_{setting}.tsv"
    if not run_path.is_file():
        raise PipelineError("dissect", f"run file not found: {run_path}")
    judgments = p.judgments()
    rankings = load_run(run_path)
    per_query = {}
    for qid, ranking in rankings.items():
        rel = judgments.relevant(qid)
        if rel:
            per_query[qid] = setting_metrics(setting, [c for c, _ in ranking], rel)
    result = RunResult(setting, rankings, per_query)
    table = dissect(result, judgments, AXES[args.axis])
    print(format_table(f"by {args.axis} type", table, list(result.metrics) + ["avg", "n"]))
    return 0


def cmd_pipeline(args) -> int:
    p = _pipeline(args)
    p.run()
    print((p.run_dir / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_ablate(args) -> int:
    p = _pipeline(args)
    try:
        variants = ablation_variants(args.without, args.stage2_only, args.disable, args.untrained)
    except ValueError as exc:
        raise PipelineError("ablate", str(exc)) from exc
    text, data = p.ablate(variants)
    p.path("ablation.txt").write_text(text, encoding="utf-8")
    p.path("ablation.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(text, end="")
    return 0


def cmd_stats(args) -> int:
    path = Path(args.pairs)
    if not path.is_file():
        raise PipelineError("stats", f"pairs file not found: {path}")
    stats = dataset_stats(load_pairs(path))
    print(json.dumps(stats.to_json(), indent=2, sort_keys=True) if args.json else stats.format())
    return 0


def cmd_synth(args) -> int:
    from .synth import make_benchmark

    bm = make_benchmark(
        seed=args.seed or 0,
        n_concepts=args.concepts,
        n_train_notes=args.train_notes,
        n_eval_notes=args.eval_notes,
    )
    out = Path(args.out)
    paths = bm.write(out)
    lines = ["[data]"] + [f"{k} = {v.name}" for k, v in paths.items() if k != "abbreviations"]
    lines += [f"abbreviation_table = {paths['abbreviations'].name}", "", "[run]", "dir = run", f"seed = {args.seed or 0}", ""]
    (out / "config.ini").write_text("\n".join(lines), encoding="utf-8")
    print(f"benchmark -> {out} ({len(bm.train_notes)} training notes, {len(bm.judgments.queries)} queries)")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--run-dir", help="run directory (overrides run.dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--jobs", type=int, help="cap on worker threads (overrides run.jobs)")
    common.add_argument("--fresh", action="store_true", help="recompute stages already recorded in the manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ehrdense", description="Two-stage dense retrieval over clinical notes.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("chunk", parents=[common], help="clean and chunk notes").set_defaults(func=cmd_chunk)
    sub.add_parser("match", parents=[common], help="dictionary-match KG terms in chunks").set_defaults(func=cmd_match)
    sub.add_parser("abbrev", parents=[common], help="reduce and clean abbreviations").set_defaults(func=cmd_abbrev)

    sp = sub.add_parser("pairs", parents=[common], help="build positive pairs for one stage")
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.set_defaults(func=cmd_pairs)

    sp = sub.add_parser("train", parents=[common], help="train one stage")
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate an encoder")
    sp.add_argument("--setting", choices=tuple(SETTINGS), required=True)
    sp.add_argument("--encoder", help="encoder file (default: latest in the run directory)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dissect", parents=[common], help="per-type breakdown of a run file")
    sp.add_argument("--axis", choices=tuple(AXES), required=True)
    sp.add_argument("--setting", choices=tuple(SETTINGS), default="single")
    sp.add_argument("--run", help="run file (default: run_<setting>.tsv in the run directory)")
    sp.set_defaults(func=cmd_dissect)

    sub.add_parser("pipeline", parents=[common], help="run every stage and write the report").set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("ablate", parents=[common], help="compare training configurations")
    sp.add_argument("--without", action="append", default=[], choices=("stage1", "stage2"), help="skip one training stage")
    sp.add_argument("--untrained", action="store_true", help="add the untrained-encoder baseline row")
    sp.add_argument("--stage2-only", action="append", default=[], choices=tuple(STAGE2_TYPES), metavar="TYPE")
    sp.add_argument("--disable", action="append", default=[], choices=SOURCES, metavar="SOURCE")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("stats", parents=[common], help="per-source statistics of a pairs file")
    sp.add_argument("pairs")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("synth", parents=[common], help="write the synthetic benchmark and a config for it")
    sp.add_argument("--out", required=True)
    sp.add_argument("--concepts", type=int, default=500)
    sp.add_argument("--train-notes", type=int, default=200)
    sp.add_argument("--eval-notes", type=int, default=40)
    sp.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (GenerationError, OSError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
