"""Command-line entry point: ``rankdistill <command> [flags]``.

Exit codes: 0 success, 1 input error (bad flags, unreadable or invalid files),
2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Sequence

from . import __version__
from .bert import BertConfig, RRABert
from .checkpoint import CheckpointError, load_checkpoint
from .evaluation import EvalResult, evaluate_run, format_run_lines, read_qrels, read_run
from .experiments import (BERT_VARIANTS, GPT_CONVERGENCE_VARIANTS, ExperimentConfig, ablation_harness,
                          gpt_grid, qrels_from_labels, set_threads)
from .gpt import GptConfig
from .labelgen import (HttpLabeler, PipelineError, RankingLabel, SyntheticOracleLabeler, build_dataset,
                       read_dataset, sub_seed)
from .nn import ModelConfig
from .text import (RESERVED_WORDS, ConfigurationError, Vocabulary, build_vocabulary,
                   generate_synthetic_corpus, read_corpus, write_corpus)
from .training import (BERT_VALIDATE_EVERY, GPT_VALIDATE_EVERY, TrainConfig, make_bert, make_gpt, fit,
                       rank_label, split_dataset)

log = logging.getLogger("rankdistill")

SECTION = "rankdistill"


class InputError(Exception):
    """Bad user input; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(f"{self.prog}: {message}")


# --- config files ---------------------------------------------------------------

def read_flat_config(path: str | Path | None) -> dict[str, str]:
    """``key = value`` lines (``#`` comments allowed), no sections required."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(f"[{SECTION}]\n" + p.read_text(encoding="utf-8"), source=str(p))
    except configparser.Error as exc:
        raise InputError(f"{p}: {exc}") from exc
    return dict(parser[SECTION])


def _coerce(value: str, annotation) -> object:
    text = value.strip()
    if annotation in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if annotation in (int, "int"):
        return int(text)
    if annotation in (float, "float"):
        return float(text)
    if "tuple" in str(annotation):
        return tuple(t.strip() for t in text.split(",") if t.strip())
    return text


def config_from(cls, values: dict[str, str], **overrides):
    """Build dataclass ``cls`` from the keys of ``values`` that name its fields."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            try:
                kwargs[f.name] = _coerce(values[f.name], hints[f.name])
            except ValueError as exc:
                raise InputError(f"config key {f.name}: {exc}") from exc
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid {cls.__name__}: {exc}") from exc


def _known_keys(*classes) -> set[str]:
    return {f.name for c in classes for f in dataclasses.fields(c)}


# --- helpers ------------------------------------------------------------------------

def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"file not found: {p}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise InputError(f"output directory does not exist: {p.parent}")
    return p


def dataset_vocabulary(labels: Sequence[RankingLabel], max_size: int = 5000) -> Vocabulary:
    texts = []
    for lab in labels:
        texts.append(lab.query)
        texts.extend(lab.documents[d] for d in sorted(lab.documents))
        texts.extend(lab.reasoning[d] for d in sorted(lab.reasoning))
    return build_vocabulary(texts, max_size, extra_tokens=RESERVED_WORDS)


def _load_dataset(path: str) -> list[RankingLabel]:
    try:
        labels = read_dataset(_existing(path))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: not a valid dataset file: {exc}") from exc
    if not labels:
        raise InputError(f"{path}: dataset is empty")
    missing = [lab.query_id for lab in labels if not lab.documents]
    if missing:
        raise InputError(f"{path}: labels without document texts (first: {missing[0]})")
    return labels


# --- commands -----------------------------------------------------------------------

def cmd_synth_corpus(args) -> int:
    out = _writable(args.out)
    sets = generate_synthetic_corpus(sub_seed(args.seed, "corpus"), args.n_queries, args.docs_per_query,
                                     vocab_size=args.vocab_size, n_topics=args.n_topics)
    write_corpus(sets, out)
    print(f"wrote {len(sets)} candidate sets to {out}", file=sys.stderr)
    return 0


def cmd_gen_labels(args) -> int:
    try:
        corpus = read_corpus(_existing(args.corpus))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.corpus}: not a valid corpus file: {exc}") from exc
    out = _writable(args.out)
    cfg = read_flat_config(args.config)
    if args.labeler == "oracle":
        labeler = config_from(SyntheticOracleLabeler, cfg, seed=sub_seed(args.seed, "labeler"))
    else:
        if "endpoint" not in cfg:
            raise InputError("the http labeler needs 'endpoint' in --config")
        labeler = config_from(HttpLabeler, cfg)
    result = build_dataset(corpus, labeler, seed=sub_seed(args.seed, "labels"),
                           sliding_window=args.sliding_window, workers=args.workers, out=out)
    print(f"wrote {len(result.labels)} labels to {out} ({len(result.skipped)} queries skipped)",
          file=sys.stderr)
    return 0


def _train(args, kind: str) -> int:
    labels = _load_dataset(args.dataset)
    cfg = read_flat_config(args.config)
    extra = set(cfg) - _known_keys(TrainConfig, ModelConfig, BertConfig, GptConfig) - {"vocab_max_size"}
    if extra:
        raise InputError(f"unknown config keys: {', '.join(sorted(extra))}")
    every = BERT_VALIDATE_EVERY if kind == "bert" else GPT_VALIDATE_EVERY
    defaults = {"validate_every": str(every)} | cfg
    tc = config_from(TrainConfig, defaults, seed=sub_seed(args.seed, "train"))
    vocab = dataset_vocabulary(labels, int(cfg.get("vocab_max_size", 5000)))
    mc = config_from(ModelConfig, cfg, vocab_size=len(vocab))
    init = sub_seed(args.seed, "init")
    if kind == "bert":
        model = make_bert(vocab, mc, config_from(BertConfig, cfg), seed=init)
    else:
        model = make_gpt(vocab, mc, config_from(GptConfig, cfg), seed=init)
    try:
        train_set, valid_set = split_dataset(labels, tc.split_ratio, sub_seed(args.seed, "split"))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = fit(model, train_set, valid_set, tc, out_dir=out, metrics_path=out / "metrics.jsonl")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "split.json").write_text(json.dumps({"train": sorted(l.query_id for l in train_set),
                                                "valid": sorted(l.query_id for l in valid_set)}) + "\n",
                                    encoding="utf-8")
    print(json.dumps({"best_checkpoint": report.best_checkpoint, "steps_to_best": report.steps_to_best,
                      "best_metric": report.best_metric}))
    return 0


def cmd_train_bert(args) -> int:
    return _train(args, "bert")


def cmd_train_gpt(args) -> int:
    return _train(args, "gpt")


def _read_docs(path: str) -> list[tuple[str, str]]:
    docs = []
    with open(_existing(path), encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{n}: expected an object with 'id' and 'text'") from exc
    ids = [d for d, _ in docs]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate document ids")
    return docs


def _load_model(path: str):
    try:
        return load_checkpoint(_existing(path))
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc


def cmd_rank(args) -> int:
    model = _load_model(args.model)
    docs = _read_docs(args.docs)
    if isinstance(model, RRABert):
        ranked = model.rank(args.query, docs, use_tcl=args.use_tcl)
    else:
        ranked = model.rank(args.query, docs)
    for line in format_run_lines(args.query_id, ranked, args.tag):
        print(line)
    return 0


def cmd_evaluate(args) -> int:
    ks = tuple(int(k) for k in args.ks.split(","))
    if args.run:
        if not args.qrels:
            raise InputError("--run needs --qrels")
        try:
            run, qrels = read_run(_existing(args.run)), read_qrels(_existing(args.qrels))
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    elif args.model and args.dataset:
        model = _load_model(args.model)
        labels = _load_dataset(args.dataset)
        if args.queries:
            keep = set(json.loads(_existing(args.queries).read_text(encoding="utf-8"))["valid"])
            labels = [lab for lab in labels if lab.query_id in keep]
        run = {lab.query_id: rank_label(model, lab) for lab in labels}
        qrels = read_qrels(_existing(args.qrels)) if args.qrels else qrels_from_labels(labels)
    else:
        raise InputError("evaluate needs either --run/--qrels or --model/--dataset")
    result: EvalResult = evaluate_run(run, qrels, ks)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True)
    if args.out:
        _writable(args.out).write_text(text + "\n", encoding="utf-8")
    print(json.dumps({"n_queries": result.n_queries, **{f"ndcg@{k}": v for k, v in result.mean.items()},
                      "skipped": result.skipped}))
    return 0


def experiment_config(values: dict[str, str]) -> ExperimentConfig:
    """ExperimentConfig fields plus ``bert_<key>`` / ``gpt_<key>`` TrainConfig overrides."""
    base = ExperimentConfig()
    train = {}
    for prefix, default in (("bert_", base.bert_train), ("gpt_", base.gpt_train)):
        sub = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
        unknown = set(sub) - _known_keys(TrainConfig)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
        merged = {f.name: str(getattr(default, f.name)) for f in dataclasses.fields(TrainConfig)} | sub
        train[prefix + "train"] = config_from(TrainConfig, merged)
    rest = {k: v for k, v in values.items() if not k.startswith(("bert_", "gpt_"))}
    unknown = set(rest) - _known_keys(ExperimentConfig)
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return config_from(ExperimentConfig, rest, **train)


def cmd_ablate(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = read_flat_config(args.config)
    exp_cfg = experiment_config(cfg)
    variants = {"bert": BERT_VARIANTS, "gpt": gpt_grid(), "convergence": GPT_CONVERGENCE_VARIANTS}[args.grid]
    if args.only:
        wanted = [v.strip() for v in args.only.split(";")]
        variants = [v for v in variants if v.name in wanted]
        if not variants:
            raise InputError(f"no variant matches --only {args.only!r}")
    table = ablation_harness(variants, seeds, exp_cfg, log=lambda m: print(m, file=sys.stderr))
    paths = table.write(args.out)
    print(table.format())
    print(f"wrote {paths[0]} and {paths[1]}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rankdistill", description="Ranking-label generation and small-ranker distillation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-corpus", help="write a seeded synthetic corpus as JSONL")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output corpus JSONL")
    s.add_argument("--n-queries", type=int, default=200)
    s.add_argument("--docs-per-query", type=int, default=50)
    s.add_argument("--vocab-size", type=int, default=200)
    s.add_argument("--n-topics", type=int, default=6)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("gen-labels", help="build the ranking-label dataset from a corpus")
    s.add_argument("--corpus", required=True, help="corpus JSONL")
    s.add_argument("--labeler", choices=("oracle", "http"), default="oracle")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output dataset JSONL")
    s.add_argument("--sliding-window", action="store_true", help="label the full list with sliding windows")
    s.add_argument("--config", help="key=value file (oracle: threshold, miss_noise; http: endpoint, model, "
                                    "timeout, max_retries); the token comes from RANKDISTILL_HTTP_TOKEN")
    s.add_argument("--workers", type=int, default=1, help="concurrent labeler calls")
    s.set_defaults(func=cmd_gen_labels)

    for name, func, what in (("train-bert", cmd_train_bert, "encoder"), ("train-gpt", cmd_train_gpt, "decoder")):
        s = sub.add_parser(name, help=f"train the {what} ranker")
        s.add_argument("--dataset", required=True, help="dataset JSONL from gen-labels")
        s.add_argument("--config", help="key=value file with training, model and ranker settings")
        s.add_argument("--out", required=True, help="output directory (best.ckpt, metrics.jsonl, report.json)")
        s.add_argument("--seed", type=int, required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("rank", help="rank documents for one query; prints TREC run lines")
    s.add_argument("--model", required=True, help="checkpoint file")
    s.add_argument("--query", required=True, help="query text")
    s.add_argument("--docs", required=True, help="JSONL with one {\"id\", \"text\"} object per line")
    s.add_argument("--query-id", default="q0")
    s.add_argument("--tag", default="rankdistill")
    s.add_argument("--use-tcl", action=argparse.BooleanOptionalAction, default=None,
                   help="encoder only: score with the term control layer (default: model setting)")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("evaluate", help="nDCG of a run against qrels, or of a model on a dataset")
    s.add_argument("--run", help="TREC run file")
    s.add_argument("--qrels", help="TREC qrels file")
    s.add_argument("--model", help="checkpoint file")
    s.add_argument("--dataset", help="dataset JSONL; binned labels serve as qrels")
    s.add_argument("--queries", help="split.json from training; evaluates its validation queries only")
    s.add_argument("--ks", default="5,10")
    s.add_argument("--out", help="write the full EvalResult JSON here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train variants over seeds and write a comparison table")
    s.add_argument("--grid", choices=("bert", "gpt", "convergence"), default="bert")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--config", help="key=value file with ExperimentConfig fields; bert_<key> and gpt_<key> set training")
    s.add_argument("--only", help="semicolon-separated variant names to keep")
    s.add_argument("--out", required=True, help="output directory for ablation.json / ablation.csv")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except InputError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except (InputError, ConfigurationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - reported, not hidden
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
