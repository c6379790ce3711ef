"""Scoring for grounded dialogue runs.

Two families live here. Quality metrics compare model output against
reference responses: entity accuracy under teacher forcing (hard argmax
and soft probability variants), micro precision/recall/F1 of the
entity-vs-generic decision, token-level precision/recall/F1 over the
entities a free-running decode actually produced, sentence BLEU-2,
perplexity, and distinct-n. Adaptation metrics compare a decode against
a re-decode after the knowledge graph was edited: the change rate and
the accurate change rate.

Every scorer is a pure function of plain token sequences and counts, so
a saved report replays exactly. `evaluate_report` drives a model over
examples and assembles the full `EvalReport`; `perturbation_report`
does the same for a perturbed run. Reports serialize to JSON and their
scalar table to CSV.

Conventions shared by the scorers:
- "entity" means the token is in the entity vocabulary passed in.
- Undefined values (no entity position in the gold data, empty
  denominator) are reported as None, never as 0.
- BLEU-2 is add-one smoothed per order; the corpus mean is scaled by
  100 in reports.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .qadpt import QadptModel, evaluate_turns

__all__ = [
    "MetricError", "PRF", "TokenPRF", "kw_acc", "kw_acc_soft",
    "kw_generic_prf", "generated_kw_prf", "bleu2_sentence", "perplexity",
    "distinct_n", "change_rate", "accurate_change_rate", "TurnEval",
    "EvalReport", "evaluate_report", "PerturbTurnEval", "PerturbReport",
    "perturbation_report", "load_report", "recompute_scalars",
]

PROB_FLOOR = 1e-12


class MetricError(ValueError):
    """Ill-posed scoring request: mismatched runs, empty corpus."""


def _f1(precision, recall):
    if precision is None or recall is None:
        return None
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class PRF:
    """Micro counts for a binary per-position decision."""
    tp: int
    fp: int
    fn: int

    @property
    def precision(self):
        return None if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self):
        return None if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def f1(self):
        return _f1(self.precision, self.recall)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall,
                "f1": self.f1}


@dataclass(frozen=True)
class TokenPRF:
    """Micro counts for token-in-set matching. Duplicates count, and the
    two directions have independent numerators: a generated token scores
    toward precision when the reference set contains it, a reference
    token toward recall when the generated set contains it."""
    p_num: int
    p_den: int
    r_num: int
    r_den: int

    @property
    def precision(self):
        return None if self.p_den == 0 else self.p_num / self.p_den

    @property
    def recall(self):
        return None if self.r_den == 0 else self.r_num / self.r_den

    @property
    def f1(self):
        return _f1(self.precision, self.recall)

    def to_dict(self) -> dict:
        return {"p_num": self.p_num, "p_den": self.p_den,
                "r_num": self.r_num, "r_den": self.r_den,
                "precision": self.precision, "recall": self.recall,
                "f1": self.f1}


def _check_parallel(a, b, what: str):
    if len(a) != len(b):
        raise MetricError(f"{what}: got {len(a)} vs {len(b)} turns")


# ---------------------------------------------------------------------------
# Teacher-forced entity metrics


def kw_acc(entities: Iterable[str], target_seqs: Sequence[Sequence[str]],
           argmax_seqs: Sequence[Sequence[str]]):
    """Fraction of gold entity positions the per-position argmax got
    right. None when the gold data has no entity positions."""
    ents = set(entities)
    _check_parallel(target_seqs, argmax_seqs, "kw_acc")
    hit = total = 0
    for gold, pred in zip(target_seqs, argmax_seqs):
        _check_parallel(gold, pred, "kw_acc positions")
        for g, p in zip(gold, pred):
            if g in ents:
                total += 1
                hit += g == p
    return None if total == 0 else hit / total


def kw_acc_soft(entities: Iterable[str], target_seqs: Sequence[Sequence[str]],
                prob_seqs: Sequence[Sequence[float]]):
    """Mean model probability of the gold token at entity positions."""
    ents = set(entities)
    _check_parallel(target_seqs, prob_seqs, "kw_acc_soft")
    mass = 0.0
    total = 0
    for gold, probs in zip(target_seqs, prob_seqs):
        _check_parallel(gold, probs, "kw_acc_soft positions")
        for g, p in zip(gold, probs):
            if g in ents:
                total += 1
                mass += float(p)
    return None if total == 0 else mass / total


def kw_generic_prf(entities: Iterable[str],
                   target_seqs: Sequence[Sequence[str]],
                   argmax_seqs: Sequence[Sequence[str]]) -> PRF:
    """Did the model choose the entity branch exactly when the gold
    token was an entity? Scored per position, micro-averaged."""
    ents = set(entities)
    _check_parallel(target_seqs, argmax_seqs, "kw_generic_prf")
    tp = fp = fn = 0
    for gold, pred in zip(target_seqs, argmax_seqs):
        _check_parallel(gold, pred, "kw_generic_prf positions")
        for g, p in zip(gold, pred):
            gold_e, pred_e = g in ents, p in ents
            if gold_e and pred_e:
                tp += 1
            elif pred_e:
                fp += 1
            elif gold_e:
                fn += 1
    return PRF(tp=tp, fp=fp, fn=fn)


# ---------------------------------------------------------------------------
# Free-running entity metrics


def generated_kw_prf(entities: Iterable[str],
                     ref_seqs: Sequence[Sequence[str]],
                     gen_seqs: Sequence[Sequence[str]]) -> TokenPRF:
    """Token-level entity overlap between decoded output and reference.
    A generated entity token counts toward precision when the reference
    mentions that entity anywhere; symmetric for recall. Repeating an
    entity repeats its contribution."""
    ents = set(entities)
    _check_parallel(ref_seqs, gen_seqs, "generated_kw_prf")
    p_num = p_den = r_num = r_den = 0
    for ref, gen in zip(ref_seqs, gen_seqs):
        ref_ent = [t for t in ref if t in ents]
        gen_ent = [t for t in gen if t in ents]
        ref_set, gen_set = set(ref_ent), set(gen_ent)
        p_den += len(gen_ent)
        p_num += sum(1 for t in gen_ent if t in ref_set)
        r_den += len(ref_ent)
        r_num += sum(1 for t in ref_ent if t in gen_set)
    return TokenPRF(p_num=p_num, p_den=p_den, r_num=r_num, r_den=r_den)


# ---------------------------------------------------------------------------
# Sequence-level metrics


def _ngrams(seq: Sequence[str], n: int) -> list:
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def bleu2_sentence(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Geometric mean of add-one smoothed modified 1- and 2-gram
    precisions, times the brevity penalty. An empty hypothesis scores 0."""
    hyp = list(hypothesis)
    ref = list(reference)
    if not hyp:
        return 0.0
    score = 1.0
    for n in (1, 2):
        hyp_grams = Counter(_ngrams(hyp, n))
        ref_grams = Counter(_ngrams(ref, n))
        clipped = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
        total = sum(hyp_grams.values())
        score *= (clipped + 1.0) / (total + 1.0)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(hyp)))
    return math.sqrt(score) * bp


def perplexity(prob_seqs: Sequence[Sequence[float]],
               floor: float = PROB_FLOOR) -> float:
    """exp of mean token NLL over all recorded gold probabilities."""
    total = 0.0
    tokens = 0
    for probs in prob_seqs:
        for p in probs:
            total += -math.log(max(float(p), floor))
            tokens += 1
    if tokens == 0:
        raise MetricError("perplexity over zero tokens")
    return math.exp(total / tokens)


def distinct_n(outputs: Sequence[Sequence[str]], n: int) -> float:
    """Unique n-grams across all outputs divided by total n-grams."""
    if n < 1:
        raise MetricError(f"distinct-n needs n >= 1, got {n}")
    grams = []
    for seq in outputs:
        grams.extend(_ngrams(list(seq), n))
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


# ---------------------------------------------------------------------------
# Graph-adaptation metrics


def change_rate(original_seqs: Sequence[Sequence[str]],
                perturbed_seqs: Sequence[Sequence[str]]) -> float:
    """Fraction of turns whose output changed at all (exact token
    sequence comparison)."""
    _check_parallel(original_seqs, perturbed_seqs, "change_rate")
    if not original_seqs:
        raise MetricError("change_rate over zero turns")
    changed = sum(tuple(a) != tuple(b)
                  for a, b in zip(original_seqs, perturbed_seqs))
    return changed / len(original_seqs)


def _accuracy_flags(entities, original_seqs, perturbed_seqs, hypotheses,
                    mode, targets):
    ents = set(entities)
    if mode not in ("all", "last1", "last2"):
        raise MetricError(f"unknown perturbation mode {mode!r}")
    _check_parallel(original_seqs, perturbed_seqs, "accurate_change_rate")
    _check_parallel(original_seqs, hypotheses, "accurate_change_rate hypotheses")
    if mode != "all":
        if targets is None:
            raise MetricError(f"mode {mode!r} needs per-turn target entities")
        _check_parallel(original_seqs, targets, "accurate_change_rate targets")
    flags = []
    for i, (orig, pert) in enumerate(zip(original_seqs, perturbed_seqs)):
        orig_ents = {t for t in orig if t in ents}
        if not orig_ents:
            flags.append(None)   # outside the denominator
            continue
        hyp = hypotheses[i]
        if hyp is None:
            raise MetricError(f"turn {i}: missing hypothesis set")
        turn_targets = orig_ents if mode == "all" else set(targets[i])
        pert_tokens = set(pert)
        clean = not (turn_targets & pert_tokens)
        # only a hypothesis entity the original output lacked witnesses
        # adaptation; this also makes accurate imply changed
        adapted = bool(set(hyp) & pert_tokens - set(orig))
        flags.append(clean and adapted)
    return flags


def accurate_change_rate(entities: Iterable[str],
                         original_seqs: Sequence[Sequence[str]],
                         perturbed_seqs: Sequence[Sequence[str]],
                         hypotheses: Sequence,
                         mode: str,
                         targets: Sequence | None = None):
    """Fraction of entity-bearing turns that adapted correctly: every
    perturbation-target entity gone from the new output, and at least
    one hypothesis entity present that the original output lacked. For
    whole-graph swaps the targets are all entities the original output
    contained; for tail edits the caller passes the replaced tails per
    turn. Turns whose original output had no entity are excluded; None
    when none remain."""
    flags = _accuracy_flags(entities, original_seqs, perturbed_seqs,
                            hypotheses, mode, targets)
    scored = [f for f in flags if f is not None]
    if not scored:
        return None
    return sum(scored) / len(scored)


# ---------------------------------------------------------------------------
# Full evaluation reports


@dataclass(frozen=True)
class TurnEval:
    """Everything one turn contributed, sufficient to re-score."""
    turn_id: str
    reference: tuple           # reference response tokens
    generated: tuple
    target_full: tuple         # reference tokens plus the closing EOS
    argmax_tokens: tuple       # per-position argmax under teacher forcing
    gold_probs: tuple
    unreachable: int
    paths: tuple               # (start, ((h, rel, t), ...), probability)
    bleu2: float

    def to_dict(self) -> dict:
        return {
            "turn_id": self.turn_id,
            "reference": list(self.reference),
            "generated": list(self.generated),
            "target_full": list(self.target_full),
            "argmax_tokens": list(self.argmax_tokens),
            "gold_probs": list(self.gold_probs),
            "unreachable": self.unreachable,
            "paths": [{"start": s, "triples": [list(t) for t in ts],
                       "probability": p} for s, ts, p in self.paths],
            "bleu2": self.bleu2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TurnEval":
        return cls(
            turn_id=d["turn_id"], reference=tuple(d["reference"]),
            generated=tuple(d["generated"]),
            target_full=tuple(d["target_full"]),
            argmax_tokens=tuple(d["argmax_tokens"]),
            gold_probs=tuple(float(p) for p in d["gold_probs"]),
            unreachable=int(d["unreachable"]),
            paths=tuple((p["start"],
                         tuple(tuple(t) for t in p["triples"]),
                         float(p["probability"])) for p in d["paths"]),
            bleu2=float(d["bleu2"]),
        )


@dataclass
class EvalReport:
    kind: str
    entities: tuple            # entity vocabulary the scores refer to
    n_turns: int
    ppl: float
    kw_acc: float | None
    kw_acc_soft: float | None
    kw_generic: PRF
    generated_kw: TokenPRF
    bleu2: float               # corpus mean, scaled by 100
    distinct: dict             # n -> ratio, n = 1..4
    unreachable_targets: int
    turns: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def metric_rows(self) -> list:
        rows = [
            ("ppl", self.ppl),
            ("kw_acc", self.kw_acc),
            ("kw_acc_soft", self.kw_acc_soft),
            ("kw_generic_precision", self.kw_generic.precision),
            ("kw_generic_recall", self.kw_generic.recall),
            ("kw_generic_f1", self.kw_generic.f1),
            ("generated_kw_precision", self.generated_kw.precision),
            ("generated_kw_recall", self.generated_kw.recall),
            ("generated_kw_f1", self.generated_kw.f1),
            ("bleu2", self.bleu2),
        ]
        rows += [(f"distinct_{n}", self.distinct[n]) for n in sorted(self.distinct)]
        rows.append(("unreachable_targets", self.unreachable_targets))
        return rows

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "entities": list(self.entities),
            "n_turns": self.n_turns,
            "metrics": {
                "ppl": self.ppl,
                "kw_acc": self.kw_acc,
                "kw_acc_soft": self.kw_acc_soft,
                "kw_generic": self.kw_generic.to_dict(),
                "generated_kw": self.generated_kw.to_dict(),
                "bleu2": self.bleu2,
                "distinct": {str(n): v for n, v in self.distinct.items()},
                "unreachable_targets": self.unreachable_targets,
            },
            "turns": [t.to_dict() for t in self.turns],
            "config": self.config,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for name, value in self.metric_rows():
                writer.writerow([name, "" if value is None else value])

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        m = d["metrics"]
        return cls(
            kind=d["kind"], entities=tuple(d["entities"]),
            n_turns=int(d["n_turns"]), ppl=float(m["ppl"]),
            kw_acc=m["kw_acc"], kw_acc_soft=m["kw_acc_soft"],
            kw_generic=PRF(tp=m["kw_generic"]["tp"], fp=m["kw_generic"]["fp"],
                           fn=m["kw_generic"]["fn"]),
            generated_kw=TokenPRF(
                p_num=m["generated_kw"]["p_num"],
                p_den=m["generated_kw"]["p_den"],
                r_num=m["generated_kw"]["r_num"],
                r_den=m["generated_kw"]["r_den"]),
            bleu2=float(m["bleu2"]),
            distinct={int(n): v for n, v in m["distinct"].items()},
            unreachable_targets=int(m["unreachable_targets"]),
            turns=[TurnEval.from_dict(t) for t in d["turns"]],
            config=dict(d.get("config", {})),
        )


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))


def recompute_scalars(report: EvalReport) -> dict:
    """Re-derive every scalar from the per-turn records alone. Used to
    prove a stored report replays."""
    turns = report.turns
    ents = report.entities
    targets = [t.target_full for t in turns]
    argmax = [t.argmax_tokens for t in turns]
    gens = [t.generated for t in turns]
    refs = [t.reference for t in turns]
    generic = kw_generic_prf(ents, targets, argmax)
    gen_kw = generated_kw_prf(ents, refs, gens)
    return {
        "ppl": perplexity([t.gold_probs for t in turns]),
        "kw_acc": kw_acc(ents, targets, argmax),
        "kw_acc_soft": kw_acc_soft(ents, targets,
                                   [t.gold_probs for t in turns]),
        "kw_generic": generic.to_dict(),
        "generated_kw": gen_kw.to_dict(),
        "bleu2": 100.0 * float(np.mean([t.bleu2 for t in turns])),
        "distinct": {str(n): distinct_n(gens, n) for n in (1, 2, 3, 4)},
        "unreachable_targets": sum(t.unreachable for t in turns),
    }


def evaluate_report(model: QadptModel, examples, max_len: int | None = None,
                    workers: int = 1, config: dict | None = None) -> EvalReport:
    """Run teacher-forced and free-running passes and score everything."""
    if not examples:
        raise MetricError("no turns to evaluate")
    records = evaluate_turns(model, examples, max_len=max_len, workers=workers)
    vocab = model.vocab
    id_to_token = vocab.id_to_token
    turns = []
    for rec in records:
        reference = tuple(rec.target_tokens)
        turns.append(TurnEval(
            turn_id=rec.turn_id,
            reference=reference,
            generated=tuple(rec.generated_tokens),
            target_full=tuple(id_to_token[i] for i in rec.target_ids),
            argmax_tokens=tuple(id_to_token[i] for i in rec.argmax_ids),
            gold_probs=tuple(rec.gold_probs),
            unreachable=rec.unreachable,
            paths=tuple((p.start, tuple(tuple(t) for t in p.triples),
                         p.probability) for p in rec.paths),
            bleu2=bleu2_sentence(rec.generated_tokens, reference),
        ))
    report = EvalReport(
        kind=model.kind, entities=vocab.entities, n_turns=len(turns),
        ppl=0.0, kw_acc=None, kw_acc_soft=None,
        kw_generic=PRF(0, 0, 0), generated_kw=TokenPRF(0, 0, 0, 0),
        bleu2=0.0, distinct={}, unreachable_targets=0, turns=turns,
        config=dict(config or {}))
    scalars = recompute_scalars(report)
    report.ppl = scalars["ppl"]
    report.kw_acc = scalars["kw_acc"]
    report.kw_acc_soft = scalars["kw_acc_soft"]
    report.kw_generic = PRF(tp=scalars["kw_generic"]["tp"],
                            fp=scalars["kw_generic"]["fp"],
                            fn=scalars["kw_generic"]["fn"])
    report.generated_kw = TokenPRF(
        p_num=scalars["generated_kw"]["p_num"],
        p_den=scalars["generated_kw"]["p_den"],
        r_num=scalars["generated_kw"]["r_num"],
        r_den=scalars["generated_kw"]["r_den"])
    report.bleu2 = scalars["bleu2"]
    report.distinct = {int(n): v for n, v in scalars["distinct"].items()}
    report.unreachable_targets = scalars["unreachable_targets"]
    return report


# ---------------------------------------------------------------------------
# Perturbation reports


@dataclass(frozen=True)
class PerturbTurnEval:
    turn_id: str
    original: tuple
    perturbed: tuple
    hypothesis: tuple          # sorted
    targets: tuple             # sorted perturbation-target entities
    skipped: bool
    changed: bool | None       # None when skipped
    accurate: bool | None      # None when skipped or no original entity

    def to_dict(self) -> dict:
        return {"turn_id": self.turn_id, "original": list(self.original),
                "perturbed": list(self.perturbed),
                "hypothesis": list(self.hypothesis),
                "targets": list(self.targets), "skipped": self.skipped,
                "changed": self.changed, "accurate": self.accurate}


@dataclass
class PerturbReport:
    mode: str
    n_turns: int               # turns that were actually perturbed
    n_skipped: int
    change_rate: float | None
    accurate_change_rate: float | None
    turns: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def metric_rows(self) -> list:
        return [("mode", self.mode), ("n_turns", self.n_turns),
                ("n_skipped", self.n_skipped),
                ("change_rate", self.change_rate),
                ("accurate_change_rate", self.accurate_change_rate)]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n_turns": self.n_turns,
                "n_skipped": self.n_skipped,
                "change_rate": self.change_rate,
                "accurate_change_rate": self.accurate_change_rate,
                "turns": [t.to_dict() for t in self.turns],
                "config": self.config}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def perturbation_report(entities: Iterable[str], runs, mode: str,
                        config: dict | None = None) -> PerturbReport:
    """Score a perturb-and-redecode run. Skipped turns (no usable path
    to perturb) stay in the record list but outside both rates."""
    live = [r for r in runs if not r.skipped]
    rate = None
    acc = None
    flags: list = []
    if live:
        originals = [r.original_tokens for r in live]
        perturbed = [r.perturbed_tokens for r in live]
        hyps = [r.hypothesis for r in live]
        targets = [r.removed_tails for r in live] if mode != "all" else None
        rate = change_rate(originals, perturbed)
        acc = accurate_change_rate(entities, originals, perturbed, hyps,
                                   mode, targets)
        flags = _accuracy_flags(entities, originals, perturbed, hyps, mode,
                                targets)
    turns = []
    it = iter(flags)
    for r in runs:
        if r.skipped:
            turns.append(PerturbTurnEval(
                turn_id=r.turn_id, original=tuple(r.original_tokens),
                perturbed=tuple(r.perturbed_tokens), hypothesis=(),
                targets=(), skipped=True, changed=None, accurate=None))
            continue
        turns.append(PerturbTurnEval(
            turn_id=r.turn_id, original=tuple(r.original_tokens),
            perturbed=tuple(r.perturbed_tokens),
            hypothesis=tuple(sorted(r.hypothesis)),
            targets=tuple(sorted(r.removed_tails)) if mode != "all" else (),
            skipped=False,
            changed=tuple(r.original_tokens) != tuple(r.perturbed_tokens),
            accurate=next(it)))
    return PerturbReport(mode=mode, n_turns=len(live),
                         n_skipped=len(runs) - len(live),
                         change_rate=rate, accurate_change_rate=acc,
                         turns=turns, config=dict(config or {}))
