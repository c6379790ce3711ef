"""Command-line driver for the whole pipeline.

One binary, seven subcommands:

  ingest    dialogues.jsonl + graph.tsv (+ alias tsv) -> bundle directory
  stats     corpus statistics table, path-length histogram, GED summary
  synth     generate the synthetic social-world corpus and ingest it
  train     fit a model on a bundle and write a checkpoint
  eval      score a checkpoint on a bundle split, write JSON + CSV
  perturb   graph-edit experiment: decode, perturb, re-decode, rates
  chat      interactive REPL with live /swap graph edits

Configuration is a line-oriented key=value file (--config) plus
per-key command-line overrides (--key value); overrides win. Unknown
keys are rejected. Every command writes the fully resolved config next
to its artifacts so runs are self-describing.

Exit codes: 0 success, 2 usage error, 3 data/model error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .corpus import (DataError, DialogueTurn, KNOWN_CORPUS_PROFILES,
                     SyntheticConfig, compare_stats, corpus_stats,
                     detokenize, generate_synthetic, ingest, load_bundle,
                     load_dialogues_jsonl, load_lexicon, save_bundle,
                     tokenize)
from .kgraph import GraphError, KnowledgeGraph, Triple, load_triples_tsv
from .metrics import (MetricError, evaluate_report, perturbation_report)
from .numkernel import KernelError
from .qadpt import (CheckpointError, Hyperparams, ModelError, QadptModel,
                    _decode_paths, greedy_decode, load_checkpoint,
                    make_example, make_examples, perturb_and_decode,
                    save_checkpoint, train)


class UsageError(ValueError):
    """Bad flags, bad config keys, bad metric names. A ValueError so
    argparse type callbacks report it as a usage problem too."""


def _parse_bool(raw: str) -> bool:
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {raw!r}")


# key -> (type, default, help). `model` and the keys below it map onto
# Hyperparams; the rest configure the corpus pipeline and run control.
CONFIG_KEYS = {
    "model": (str, "qadpt", "model kind: qadpt or seq2seq"),
    "hidden": (int, 64, "hidden state width"),
    "embed": (int, 0, "embedding width; 0 follows hidden"),
    "hops": (int, 6, "reasoning walk length"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "batch_size": (int, 32, "examples per update"),
    "epochs": (int, 30, "max epochs per phase"),
    "patience": (int, 3, "non-improving epochs tolerated"),
    "clip_norm": (float, 5.0, "global gradient norm ceiling"),
    "prob_floor": (float, 1e-12, "probability floor inside the loss"),
    "max_decode_len": (int, 40, "free-running decode cap"),
    "teacher_forcing": (bool, True, "feed gold prefixes while training"),
    "fine_tune": (bool, False, "second phase on entity-bearing turns"),
    "post_renorm": (bool, False,
                    "binary walk weights, renormalize after each hop"),
    "seed": (int, 0, "training / perturbation seed"),
    "tokenize": (str, "word", "tokenizer mode: word or char"),
    "min_count": (int, 1, "vocabulary frequency cutoff"),
    "subgraph_k": (int, 5, "paths per source/target pair"),
    "split_seed": (int, 0, "dialogue split seed"),
    "split": (str, "test", "bundle split for eval/perturb"),
    "mode": (str, "last1", "perturbation protocol: all, last1, last2"),
    "metrics": (str, "", "comma list of scalars to keep; empty keeps all"),
    "workers": (int, 1, "parallel turn evaluation"),
    "n_people": (int, 30, "synthetic: people"),
    "n_places": (int, 12, "synthetic: places"),
    "n_jobs": (int, 8, "synthetic: occupations"),
    "n_turns": (int, 2000, "synthetic: total turns"),
    "turns_per_dialogue": (int, 5, "synthetic: dialogue length"),
    "chitchat_rate": (float, 0.1, "synthetic: ungrounded turn share"),
}

METRIC_NAMES = (
    "ppl", "kw_acc", "kw_acc_soft", "kw_generic_precision",
    "kw_generic_recall", "kw_generic_f1", "generated_kw_precision",
    "generated_kw_recall", "generated_kw_f1", "bleu2", "distinct_1",
    "distinct_2", "distinct_3", "distinct_4", "unreachable_targets",
)


def _coerce(key: str, raw: str):
    want = CONFIG_KEYS[key][0]
    try:
        if want is bool:
            return _parse_bool(raw)
        return want(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key}: bad value {raw!r}") from None


def _read_config_file(path) -> list:
    pairs = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if "=" not in body:
            raise UsageError(f"{path} line {lineno}: expected key=value")
        key, _, value = body.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {key: meta[1] for key, meta in CONFIG_KEYS.items()}
    path = getattr(args, "config", None)
    if path:
        for key, raw in _read_config_file(path):
            if key not in CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r} in {path}")
            cfg[key] = _coerce(key, raw)
    for key in CONFIG_KEYS:
        override = getattr(args, key, None)
        if override is not None:
            cfg[key] = override
    return cfg


def hyper_from_config(cfg: dict) -> Hyperparams:
    return Hyperparams(
        kind=cfg["model"], hidden_dim=cfg["hidden"],
        embed_dim=cfg["embed"] or None, n_hops=cfg["hops"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
        patience=cfg["patience"], clip_norm=cfg["clip_norm"],
        prob_floor=cfg["prob_floor"], max_decode_len=cfg["max_decode_len"],
        teacher_forcing=cfg["teacher_forcing"], fine_tune=cfg["fine_tune"],
        post_renorm=cfg["post_renorm"], seed=cfg["seed"])


def _write_config(cfg: dict, args: argparse.Namespace, out_dir: Path) -> None:
    record = {"command": args.command, "config": cfg,
              "paths": {k: str(v) for k, v in vars(args).items()
                        if k.endswith(("dialogues", "kg", "lexicon", "bundle",
                                       "checkpoint", "out")) and v}}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1)
        fh.write("\n")


def _print_table(rows) -> None:
    width = max((len(str(name)) for name, _ in rows), default=0)
    for name, value in rows:
        shown = "n/a" if value is None else value
        print(f"  {name:<{width}}  {shown}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args, cfg) -> int:
    raw = load_dialogues_jsonl(args.dialogues)
    graph = load_triples_tsv(args.kg)
    lexicon = None
    if args.lexicon:
        lexicon = load_lexicon(args.lexicon)
    else:
        print("no alias file given; matching canonical entity names only")
    bundle = ingest(raw, graph, lexicon, mode=cfg["tokenize"],
                    split_seed=cfg["split_seed"], min_count=cfg["min_count"],
                    subgraph_k=cfg["subgraph_k"])
    out = Path(args.out)
    save_bundle(bundle, out)
    _write_config(cfg, args, out)
    print(f"ingested {bundle.meta['n_dialogues']} dialogues, "
          f"{bundle.meta['n_turns']} turns")
    print(f"vocabulary: {len(bundle.vocab.generic)} generic words, "
          f"{bundle.vocab.n_entities} entities, "
          f"{len(bundle.vocab.relations)} relation types")
    for name in ("train", "test", "valid"):
        print(f"  split {name}: {len(getattr(bundle.splits, name))} dialogues")
    print(f"bundle written to {out}")
    return 0


def cmd_stats(args, cfg) -> int:
    bundle = load_bundle(args.bundle)
    st = corpus_stats(bundle)
    print("corpus statistics")
    _print_table(st.rows())
    print(f"  shortest-path histogram: "
          f"{ {k: v for k, v in sorted(st.path_length_hist.items())} }"
          f" unreachable={st.unreachable_pairs}")
    print(f"  scene GED between consecutive turns: "
          f"{st.ged_mean:.2f} +/- {st.ged_std:.2f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        blob = dataclasses.asdict(st)
        blob["path_length_hist"] = {str(k): v
                                    for k, v in st.path_length_hist.items()}
        with open(out / "stats.json", "w", encoding="utf-8") as fh:
            json.dump(blob, fh, indent=1)
            fh.write("\n")
        with open(out / "path_hist.csv", "w", encoding="utf-8",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["hops", "pairs"])
            for hops in sorted(st.path_length_hist):
                writer.writerow([hops, st.path_length_hist[hops]])
            writer.writerow(["unreachable", st.unreachable_pairs])
        _write_config(cfg, args, out)
        print(f"stats written to {out}")
    bad = 0
    if args.expect:
        rows = compare_stats(st, args.expect)
        print(f"comparison against the {args.expect!r} profile")
        for name, want, actual, ok in rows:
            flag = "ok" if ok else "MISMATCH"
            print(f"  {name:<24} want {want:>10} got {actual:>10}  {flag}")
        bad = sum(1 for r in rows if not r[3])
        print(f"{bad} of {len(rows)} rows deviate" if bad else
              "all rows match")
    return 0


def cmd_synth(args, cfg) -> int:
    sconf = SyntheticConfig(
        n_people=cfg["n_people"], n_places=cfg["n_places"],
        n_jobs=cfg["n_jobs"], n_turns=cfg["n_turns"],
        turns_per_dialogue=cfg["turns_per_dialogue"],
        chitchat_rate=cfg["chitchat_rate"])
    syn = generate_synthetic(sconf, seed=cfg["seed"])
    bundle = ingest(syn.raw_turns, syn.graph, syn.lexicon,
                    mode=cfg["tokenize"], split_seed=cfg["split_seed"],
                    min_count=cfg["min_count"], subgraph_k=cfg["subgraph_k"])
    out = Path(args.out)
    save_bundle(bundle, out)
    with open(out / "oracle_paths.json", "w", encoding="utf-8") as fh:
        json.dump({tid: [list(t) for t in path]
                   for tid, path in syn.oracle_paths.items()}, fh, indent=1)
        fh.write("\n")
    with open(out / "expected.json", "w", encoding="utf-8") as fh:
        json.dump(syn.expected, fh, indent=1)
        fh.write("\n")
    _write_config(cfg, args, out)
    print(f"synthetic corpus: {bundle.meta['n_dialogues']} dialogues, "
          f"{bundle.meta['n_turns']} turns, "
          f"{len(syn.graph.entities)} entities, "
          f"{len(syn.graph.relations)} relation types")
    print(f"bundle written to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    bundle = load_bundle(args.bundle)
    hyper = hyper_from_config(cfg)
    model = QadptModel(hyper, bundle.vocab)
    train_ex = make_examples(bundle, bundle.split_turns("train"))
    val_ex = make_examples(bundle, bundle.split_turns("valid"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, train_ex, val_ex,
                   log_path=out / "train_log.jsonl")
    save_checkpoint(model, out / "model.ckpt")
    _write_config(cfg, args, out)
    print(f"trained {hyper.kind} for {result.epochs_run} epochs "
          f"({len(train_ex)} train / {len(val_ex)} validation turns)")
    print(f"best validation perplexity {result.best_val_ppl:.4f}")
    if result.unreachable_total:
        print(f"unreachable targets during training: "
              f"{result.unreachable_total}")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return 0


def _load_examples(args, cfg):
    bundle = load_bundle(args.bundle)
    model = load_checkpoint(args.checkpoint)
    if model.vocab != bundle.vocab:
        raise DataError("checkpoint vocabulary does not match the bundle; "
                        "was it trained on a different ingest?")
    turns = bundle.split_turns(cfg["split"])
    if not turns:
        raise DataError(f"split {cfg['split']!r} has no turns")
    return model, make_examples(bundle, turns)


def cmd_eval(args, cfg) -> int:
    selected = [m for m in cfg["metrics"].split(",") if m]
    for name in selected:
        if name not in METRIC_NAMES:
            raise UsageError(f"unknown metric {name!r}; "
                             f"choose from {', '.join(METRIC_NAMES)}")
    model, examples = _load_examples(args, cfg)
    report = evaluate_report(model, examples, max_len=cfg["max_decode_len"],
                             workers=cfg["workers"], config=cfg)
    rows = report.metric_rows()
    if selected:
        rows = [r for r in rows if r[0] in selected]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blob = report.to_dict()
    if selected:
        m = blob["metrics"]
        keep = {}
        for scalar in ("ppl", "kw_acc", "kw_acc_soft", "bleu2",
                       "unreachable_targets"):
            if scalar in selected:
                keep[scalar] = m[scalar]
        for group in ("kw_generic", "generated_kw"):
            if any(s.startswith(group) for s in selected):
                keep[group] = m[group]
        orders = {s.split("_")[1] for s in selected
                  if s.startswith("distinct_")}
        if orders:
            keep["distinct"] = {n: v for n, v in m["distinct"].items()
                                if n in orders}
        blob["metrics"] = keep
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=1)
        fh.write("\n")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, "" if value is None else value])
    _write_config(cfg, args, out)
    print(f"evaluated {report.n_turns} {cfg['split']} turns with "
          f"{model.kind}")
    _print_table(rows)
    print(f"report written to {out / 'report.json'}")
    return 0


def cmd_perturb(args, cfg) -> int:
    if cfg["mode"] not in ("all", "last1", "last2"):
        raise UsageError(f"unknown perturbation mode {cfg['mode']!r}")
    model, examples = _load_examples(args, cfg)
    runs = perturb_and_decode(model, examples, cfg["mode"], seed=cfg["seed"],
                              max_len=cfg["max_decode_len"])
    report = perturbation_report(model.vocab.entities, runs, cfg["mode"],
                                 config=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "perturb.json")
    with open(out / "diff.log", "w", encoding="utf-8") as fh:
        for t in report.turns:
            tag = "skipped" if t.skipped else (
                "accurate" if t.accurate else
                ("changed" if t.changed else "unchanged"))
            fh.write(f"{t.turn_id}\t{tag}\t{' '.join(t.original)}\t"
                     f"{' '.join(t.perturbed)}\n")
    _write_config(cfg, args, out)
    print(f"perturbation mode {cfg['mode']}: {report.n_turns} turns scored, "
          f"{report.n_skipped} skipped")
    if report.n_turns == 0:
        print("zero denominator: no turn had a usable reasoning path")
    _print_table([("change_rate", report.change_rate),
                  ("accurate_change_rate", report.accurate_change_rate)])
    print(f"report written to {out / 'perturb.json'}")
    return 0


CHAT_USAGE = ("commands: /swap HEAD RELATION OLD_TAIL NEW_TAIL, "
              "/graph, /quit")


def cmd_chat(args, cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    mode = cfg["tokenize"]
    if args.kg:
        graph = load_triples_tsv(args.kg)
    elif args.bundle:
        bundle = load_bundle(args.bundle)
        graph = bundle.graph
        mode = bundle.meta.get("mode", mode)
    else:
        raise DataError("chat needs --kg or --bundle for the knowledge graph")
    stray = (graph.entities - set(model.vocab.entities)) | \
        (graph.relations - set(model.vocab.relations))
    if stray:
        raise DataError(f"graph does not match the checkpoint vocabulary; "
                        f"unknown symbols include {sorted(stray)[:5]}")
    lex = {e: e for e in graph.entities}
    print(f"{model.kind} loaded; {len(graph.triples)} triples. {CHAT_USAGE}")
    turn_no = 0
    while True:
        try:
            line = input("> ").strip()
        except EOFError:
            print()
            return 0
        if not line:
            continue
        if line in ("/quit", "/exit"):
            return 0
        if line == "/graph":
            for t in sorted(graph.triples):
                print(f"  {t.head} -{t.relation}-> {t.tail}")
            continue
        if line.startswith("/swap"):
            parts = line.split()
            if len(parts) != 5:
                print(CHAT_USAGE)
                continue
            _, head, rel, old_tail, new_tail = parts
            victim = Triple(head, rel, old_tail)
            if victim not in graph.triples:
                print(f"no such triple: {head} -{rel}-> {old_tail}")
                continue
            if new_tail not in model.vocab.entities:
                print(f"{new_tail!r} is outside the model's entity "
                      f"vocabulary; swap refused")
                continue
            triples = set(graph.triples)
            triples.remove(victim)
            triples.add(Triple(head, rel, new_tail))
            graph = KnowledgeGraph(triples,
                                   extra_entities=graph.entities | {new_tail})
            lex = {e: e for e in graph.entities}
            print(f"swapped: {head} -{rel}-> {new_tail}")
            continue
        if line.startswith("/"):
            print(CHAT_USAGE)
            continue
        turn = DialogueTurn(dialogue_id="chat", turn=turn_no, speaker="user",
                            scene_entities=(),
                            message=tuple(tokenize(line, mode, lex)),
                            response=())
        turn_no += 1
        ex = make_example(turn, graph, model.vocab)
        dec = greedy_decode(model, ex, max_len=cfg["max_decode_len"])
        print(detokenize(dec.tokens, mode) or "(empty reply)")
        for path in _decode_paths(model, ex, dec):
            hops = " ".join(f"-{t.relation}-> {t.tail}" for t in path.triples)
            print(f"  path: {path.start} {hops}" if hops
                  else f"  path: {path.start} (direct)")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="key=value config file")
    for key, (want, default, text) in CONFIG_KEYS.items():
        kind = _parse_bool if want is bool else want
        p.add_argument(f"--{key}", type=kind, default=None,
                       help=f"{text} (default {default})", metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgchat",
        description="knowledge-grounded dialogue: corpus, training, "
                    "evaluation, graph-perturbation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="preprocess a corpus into a bundle")
    p.add_argument("--dialogues", required=True, metavar="JSONL")
    p.add_argument("--kg", required=True, metavar="TSV")
    p.add_argument("--lexicon", metavar="TSV",
                   help="surface -> canonical entity aliases")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_ingest)
    _add_config_options(p)

    p = sub.add_parser("stats", help="corpus statistics and histograms")
    p.add_argument("--bundle", required=True, metavar="DIR")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--expect", choices=sorted(KNOWN_CORPUS_PROFILES),
                   help="compare against a known corpus profile")
    p.set_defaults(func=cmd_stats)
    _add_config_options(p)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)
    _add_config_options(p)

    p = sub.add_parser("train", help="fit a model on a bundle")
    p.add_argument("--bundle", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_train)
    _add_config_options(p)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--bundle", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_eval)
    _add_config_options(p)

    p = sub.add_parser("perturb", help="graph-perturbation experiment")
    p.add_argument("--bundle", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_perturb)
    _add_config_options(p)

    p = sub.add_parser("chat", help="interactive REPL with live graph edits")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--kg", metavar="TSV")
    p.add_argument("--bundle", metavar="DIR")
    p.set_defaults(func=cmd_chat)
    _add_config_options(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, GraphError, ModelError, CheckpointError,
            MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KernelError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def console() -> None:
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    console()
