"""Knowledge-routed dialogue model and its plain encoder-decoder baseline.

The main model decodes each token from a joint softmax over the generic
words plus one reserved KB symbol; the KB symbol's probability gates a
distribution over graph entities obtained by walking the turn's
subgraph N steps from the entities mentioned in the input. The walk's
per-head relation choices come from the decoder state, so editing the
graph changes the reply with frozen parameters.

Everything runs on the recorded-op tape from numkernel, training and
inference alike, so there is exactly one implementation of the forward
pass. Checkpoints are a small binary format: magic, JSON header, raw
little-endian float64 payload (see save_checkpoint).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numkernel
from .corpus import (BOS_ID, EOS_ID, PAD_ID, SPECIALS, UNK_ID, Bundle,
                     DataError, DialogueTurn, Vocabulary)
from .kgraph import (AdjacencyTensor, KnowledgeGraph, Triple, build_adjacency,
                     perturb_all, perturb_last1, perturb_last2)
from .numkernel import KernelError, Tape

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"QADPT1\n"

GRU_FIELDS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

KINDS = ("qadpt", "seq2seq")


class ModelError(ValueError):
    """Model misuse: bad shapes, empty inputs, unreachable path queries."""


class CheckpointError(ValueError):
    """Unreadable or corrupt checkpoint file."""


@dataclass(frozen=True)
class Hyperparams:
    hidden_dim: int = 64
    embed_dim: int | None = None   # defaults to hidden_dim
    n_hops: int = 6
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    clip_norm: float = 5.0
    prob_floor: float = 1e-12
    max_decode_len: int = 40
    teacher_forcing: bool = True
    fine_tune: bool = False
    post_renorm: bool = False
    kind: str = "qadpt"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", self.hidden_dim)
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ModelError("dims must be >= 1")
        if self.n_hops < 1:
            raise ModelError("hop count must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ModelError("bad training configuration")
        if self.lr <= 0 or self.clip_norm <= 0 or self.prob_floor <= 0:
            raise ModelError("lr, clip_norm and prob_floor must be positive")
        if self.max_decode_len < 1:
            raise ModelError("max_decode_len must be >= 1")
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def expected_param_shapes(hyper: Hyperparams, vocab: Vocabulary) -> dict:
    h, e = hyper.hidden_dim, hyper.embed_dim
    shapes = {"embed": (vocab.size, e)}
    for prefix in ("enc", "dec"):
        for f in GRU_FIELDS:
            if f.startswith("b"):
                shapes[f"{prefix}.{f}"] = (h,)
            elif f.startswith("w"):
                shapes[f"{prefix}.{f}"] = (h, e)
            else:
                shapes[f"{prefix}.{f}"] = (h, h)
    if hyper.kind == "qadpt":
        shapes["phi_w"] = (vocab.generic_output_size, h)
        shapes["phi_b"] = (vocab.generic_output_size,)
        n_rel = len(vocab.relations) + 1   # with self-loop
        shapes["theta_w"] = (vocab.n_entities * n_rel, h)
        shapes["theta_b"] = (vocab.n_entities * n_rel,)
    else:
        n_out = 2 + len(vocab.generic) + vocab.n_entities
        shapes["out_w"] = (n_out, h)
        shapes["out_b"] = (n_out,)
    return shapes


def init_params(hyper: Hyperparams, vocab: Vocabulary, seed: int) -> dict:
    """Fresh parameters; weights uniform(-0.08, 0.08), biases zero. Draw
    order is fixed (embed, encoder, decoder, output, reasoning) so a
    seed pins every value."""
    rng = np.random.default_rng(seed)
    params = {"embed": numkernel.init_uniform(rng, (vocab.size, hyper.embed_dim))}
    for prefix in ("enc", "dec"):
        cell = numkernel.GruCellParams.create(rng, hyper.embed_dim, hyper.hidden_dim)
        params.update(cell.named(prefix))
    shapes = expected_param_shapes(hyper, vocab)
    if hyper.kind == "qadpt":
        params["phi_w"] = numkernel.init_uniform(rng, shapes["phi_w"])
        params["phi_b"] = np.zeros(shapes["phi_b"])
        params["theta_w"] = numkernel.init_uniform(rng, shapes["theta_w"])
        params["theta_b"] = np.zeros(shapes["theta_b"])
    else:
        params["out_w"] = numkernel.init_uniform(rng, shapes["out_w"])
        params["out_b"] = np.zeros(shapes["out_b"])
    return params


class QadptModel:
    """Parameter container plus the shared tape-based forward pass."""

    def __init__(self, hyper: Hyperparams, vocab: Vocabulary,
                 params: Mapping | None = None):
        self.hyper = hyper
        self.vocab = vocab
        if params is None:
            params = init_params(hyper, vocab, hyper.seed)
        expected = expected_param_shapes(hyper, vocab)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ModelError(f"parameter set mismatch: missing {missing}, "
                             f"unexpected {extra}")
        self.params = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ModelError(f"param {name}: shape {arr.shape}, want {shape}")
            self.params[name] = arr

    @property
    def kind(self) -> str:
        return self.hyper.kind

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def adjacency(self, subgraph: KnowledgeGraph) -> AdjacencyTensor:
        return build_adjacency(subgraph, self.vocab.entities, self.vocab.relations)


def build_source_vector(vocab: Vocabulary, sources: Iterable[str],
                        k_entities: Iterable[str]) -> np.ndarray:
    """Start distribution of the reasoning walk: uniform over the given
    source entities present in the subgraph, falling back to uniform
    over the whole subgraph when no source survives, and all-zero for an
    empty subgraph (the entity branch carries no mass that turn)."""
    k_set = set(k_entities)
    support = sorted(set(sources) & k_set)
    if not support:
        support = sorted(k_set)
    s = np.zeros(vocab.n_entities)
    if not support:
        return s
    pos = [vocab.entity_position(vocab.token_to_id(e)) for e in support]
    s[pos] = 1.0 / len(support)
    return s


@dataclass
class Example:
    """One turn, fully indexed and ready for the model."""
    turn_id: str
    enc_ids: tuple
    dec_in_ids: tuple
    target_ids: tuple
    target_tokens: tuple
    subgraph: KnowledgeGraph
    adj: AdjacencyTensor
    source_vec: np.ndarray
    raw_sources: tuple
    has_entity: bool


def make_example(turn: DialogueTurn, subgraph: KnowledgeGraph,
                 vocab: Vocabulary) -> Example:
    adj = build_adjacency(subgraph, vocab.entities, vocab.relations)
    msg_ents, _ = turn.entity_tokens(vocab)
    raw_sources = tuple(sorted(set(msg_ents) | set(turn.scene_entities)))
    s = build_source_vector(vocab, raw_sources, subgraph.entities)
    enc_ids = vocab.tokens_to_ids(turn.scene_entities) + \
        vocab.tokens_to_ids(turn.message)
    if not enc_ids:
        enc_ids = [PAD_ID]
    target_ids = tuple(vocab.tokens_to_ids(turn.response)) + (EOS_ID,)
    return Example(
        turn_id=turn.turn_id,
        enc_ids=tuple(enc_ids),
        dec_in_ids=(BOS_ID,) + target_ids[:-1],
        target_ids=target_ids,
        target_tokens=tuple(turn.response),
        subgraph=subgraph,
        adj=adj,
        source_vec=s,
        raw_sources=raw_sources,
        has_entity=turn.has_entities(vocab),
    )


def make_examples(bundle: Bundle, turns: Sequence[DialogueTurn] | None = None,
                  vocab: Vocabulary | None = None) -> list:
    vocab = vocab or bundle.vocab
    turns = bundle.turns if turns is None else turns
    return [make_example(t, bundle.subgraph_for(t), vocab) for t in turns]


# ---------------------------------------------------------------------------
# Forward pass
#
# _Forward wraps one tape with the parameters recorded on it once. Turn
# state (adjacency, source vector) is bound per example. Training calls
# backward() on the assembled loss; evaluation and decoding just read
# node values off the same graph construction.


def _binary_adjacency(adj: AdjacencyTensor) -> AdjacencyTensor:
    return dataclasses.replace(adj, weight=np.ones_like(adj.weight))


class _Forward:
    def __init__(self, model: QadptModel, tape: Tape | None = None):
        self.model = model
        self.tape = tape or Tape()
        self.pn = {name: self.tape.leaf(arr)
                   for name, arr in sorted(model.params.items())}
        self._enc = tuple(self.pn[f"enc.{f}"] for f in GRU_FIELDS)
        self._dec = tuple(self.pn[f"dec.{f}"] for f in GRU_FIELDS)
        self._h0 = self.tape.leaf(np.zeros(model.hyper.hidden_dim))

    def encode(self, token_ids: Sequence[int]) -> int:
        if not token_ids:
            raise ModelError("encoder input is empty")
        t = self.tape
        h = self._h0
        for tid in token_ids:
            x = t.lookup_row(self.pn["embed"], int(tid))
            h = t.gru(x, h, *self._enc)
        return h

    def bind(self, example: Example) -> "_TurnState":
        return _TurnState(self, example)


# seq2seq emits from one flat softmax over [EOS, UNK] + generic + entities
def seq2seq_output_ids(vocab: Vocabulary) -> np.ndarray:
    ids = [EOS_ID, UNK_ID]
    ids.extend(range(len(SPECIALS), len(SPECIALS) + len(vocab.generic)))
    ids.extend(range(vocab.entity_base, vocab.entity_base + vocab.n_entities))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class DecoderStep:
    """Everything one decode step produced, as plain arrays."""
    hidden: np.ndarray
    generic: np.ndarray          # distribution over emittable generic symbols
    controller: float            # mass routed to the entity branch
    entity: np.ndarray           # entity distribution (k for qadpt)
    combined: np.ndarray         # full-vocabulary output distribution
    path_matrix: np.ndarray | None   # renormalized relation choices, or None


class _TurnState:
    """Per-example decoder state over a shared _Forward."""

    def __init__(self, fw: _Forward, example: Example):
        self.fw = fw
        self.ex = example
        model = fw.model
        self.hyper = model.hyper
        self.vocab = model.vocab
        t = fw.tape
        if model.kind == "qadpt":
            self.adj = example.adj
            self.hop_adj = (_binary_adjacency(example.adj)
                            if model.hyper.post_renorm else example.adj)
            self.mask = t.leaf(example.adj.active)
            self.s = t.leaf(example.source_vec)
            self.s_total = float(example.source_vec.sum())
            if model.hyper.post_renorm:
                self._ones_row = t.leaf(np.ones((1, self.vocab.n_entities)))
        else:
            self.out_ids = seq2seq_output_ids(self.vocab)
            self.out_pos = {int(v): i for i, v in enumerate(self.out_ids)}
        self.h = fw.encode(example.enc_ids)

    # one decoder step; returns node handles for the loss and a
    # DecoderStep of concrete values for everything else
    def step(self, prev_id: int) -> tuple:
        t = self.fw.tape
        pn = self.fw.pn
        x = t.lookup_row(pn["embed"], int(prev_id))
        self.h = t.gru(x, self.h, *self.fw._dec)
        if self.fw.model.kind == "seq2seq":
            logits = t.add(t.matvec(pn["out_w"], self.h), pn["out_b"])
            probs = t.softmax(logits)
            return probs, None, None
        g = t.softmax(t.add(t.matvec(pn["phi_w"], self.h), pn["phi_b"]))
        n = self.vocab.n_entities
        n_rel = len(self.vocab.relations) + 1
        theta = t.add(t.matvec(pn["theta_w"], self.h), pn["theta_b"])
        r = t.row_softmax(t.reshape(theta, (n, n_rel)))
        if self.hyper.post_renorm:
            rhat = r
        else:
            rhat = t.mask_renorm_rows(r, self.mask)
        k = self.s
        if self.s_total > 0.0:
            for _ in range(self.hyper.n_hops):
                k = t.kg_hop(k, rhat, self.hop_adj)
            if self.hyper.post_renorm:
                # unmasked rows lose mass at heads lacking a chosen
                # relation, so the walk result is renormalized here
                k = t.reshape(t.mask_renorm_rows(
                    t.reshape(k, (1, n)), self._ones_row), (n,))
        return g, k, rhat

    def decoder_step(self, prev_id: int) -> tuple:
        """step() plus the assembled DecoderStep record."""
        a, b, c = self.step(prev_id)
        t = self.fw.tape
        vocab = self.vocab
        o = np.zeros(vocab.size)
        if self.fw.model.kind == "seq2seq":
            probs = t.value(a)
            o[self.out_ids] = probs
            n_gen = 2 + len(vocab.generic)
            step = DecoderStep(hidden=t.value(self.h).copy(),
                               generic=probs[:n_gen].copy(),
                               controller=float(probs[n_gen:].sum()),
                               entity=probs[n_gen:].copy(),
                               combined=o, path_matrix=None)
            return (a, b, c), step
        g, k, rhat = t.value(a), t.value(b), t.value(c)
        o[vocab.generic_output_ids[1:]] = g[1:]
        o[vocab.entity_base:] = g[0] * k
        step = DecoderStep(hidden=t.value(self.h).copy(), generic=g[1:].copy(),
                           controller=float(g[0]), entity=k.copy(),
                           combined=o, path_matrix=rhat.copy())
        return (a, b, c), step

    def target_prob_node(self, nodes: tuple, target_id: int) -> tuple:
        """Node for o_t(y_t) plus whether the entity target was
        unreachable under the current walk."""
        t = self.fw.tape
        vocab = self.vocab
        if self.fw.model.kind == "seq2seq":
            probs, _, _ = nodes
            return t.pick(probs, self.out_pos[int(target_id)]), False
        g, k, _ = nodes
        if vocab.is_entity_id(target_id):
            pos = vocab.entity_position(target_id)
            unreachable = bool(t.value(k)[pos] <= 0.0)
            return t.mul(t.pick(g, 0), t.pick(k, pos)), unreachable
        pos = vocab.generic_block_index.get(int(target_id))
        if pos is None:
            raise ModelError(f"target id {target_id} is not emittable")
        return t.pick(g, pos), False


def _turn_loss_nodes(state: _TurnState, hyper: Hyperparams) -> tuple:
    """Per-token negative log likelihood nodes for one turn."""
    t = state.fw.tape
    nll = []
    unreachable = 0
    ex = state.ex
    prev = ex.dec_in_ids[0]
    for i, target in enumerate(ex.target_ids):
        nodes = state.step(prev)
        p, unreach = state.target_prob_node(nodes, target)
        if unreach:
            unreachable += 1
        nll.append(t.scale(t.log_floor(p, hyper.prob_floor), -1.0))
        if i + 1 < len(ex.target_ids):
            if hyper.teacher_forcing:
                prev = ex.dec_in_ids[i + 1]
            else:
                prev = int(np.argmax(_combined_node_values(state, nodes)))
    return nll, unreachable


def _combined_node_values(state: _TurnState, nodes: tuple) -> np.ndarray:
    t = state.fw.tape
    vocab = state.vocab
    o = np.zeros(vocab.size)
    if state.fw.model.kind == "seq2seq":
        o[state.out_ids] = t.value(nodes[0])
        return o
    g, k, _ = nodes
    gval = t.value(g)
    o[vocab.generic_output_ids[1:]] = gval[1:]
    o[vocab.entity_base:] = gval[0] * t.value(k)
    return o


def batch_loss(model: QadptModel, examples: Sequence[Example]) -> tuple:
    """(tape, loss node, token count, unreachable count) for one batch.

    The loss is the mean over target tokens of -log o_t(y_t) with the
    configured probability floor.
    """
    if not examples:
        raise ModelError("empty batch")
    fw = _Forward(model)
    all_nll = []
    unreachable = 0
    for ex in examples:
        state = fw.bind(ex)
        nll, u = _turn_loss_nodes(state, model.hyper)
        all_nll.extend(nll)
        unreachable += u
    loss = fw.tape.scale(fw.tape.add_n(all_nll), 1.0 / len(all_nll))
    return fw.tape, loss, len(all_nll), unreachable


def param_grads(model: QadptModel, tape: Tape, loss: int) -> dict:
    """Gradients of the loss with respect to every named parameter, for
    a tape built by batch_loss (parameters are the first recorded
    leaves, in sorted name order)."""
    names = sorted(model.params)
    grads_list = tape.backward(loss)
    return {name: grads_list[i] for i, name in enumerate(names)}


# ---------------------------------------------------------------------------
# Teacher-forced evaluation and free-running decoding


@dataclass
class TeacherResult:
    turn_id: str
    target_ids: tuple
    gold_probs: tuple      # o_t(y_t) per target position
    argmax_ids: tuple      # full-vocabulary argmax per position
    unreachable: int


def teacher_force(model: QadptModel, example: Example) -> TeacherResult:
    fw = _Forward(model)
    state = fw.bind(example)
    probs = []
    argmax = []
    unreachable = 0
    for prev, target in zip(example.dec_in_ids, example.target_ids):
        nodes = state.step(prev)
        p, unreach = state.target_prob_node(nodes, target)
        if unreach:
            unreachable += 1
        probs.append(float(fw.tape.value(p)))
        argmax.append(int(np.argmax(_combined_node_values(state, nodes))))
    return TeacherResult(turn_id=example.turn_id,
                         target_ids=example.target_ids,
                         gold_probs=tuple(probs), argmax_ids=tuple(argmax),
                         unreachable=unreachable)


@dataclass
class DecodeResult:
    token_ids: tuple           # emitted ids, closing EOS not included
    tokens: tuple
    steps: tuple               # DecoderStep per emitted position (EOS too)
    ended_with_eos: bool


def greedy_decode(model: QadptModel, example: Example,
                  max_len: int | None = None, sample: bool = False,
                  rng: np.random.Generator | None = None) -> DecodeResult:
    """Free-running decoding from the example's message and subgraph.
    Greedy argmax by default; with sample=True, draws from o_t using the
    given generator. Ties resolve to the lowest token id."""
    max_len = max_len or model.hyper.max_decode_len
    if sample and rng is None:
        raise ModelError("sampling needs a random generator")
    fw = _Forward(model)
    state = fw.bind(example)
    out_ids = []
    steps = []
    prev = BOS_ID
    ended = False
    for _ in range(max_len):
        _, step = state.decoder_step(prev)
        o = step.combined
        if sample:
            prev = int(rng.choice(len(o), p=o / o.sum()))
        else:
            prev = int(np.argmax(o))
        steps.append(step)
        if prev == EOS_ID:
            ended = True
            break
        out_ids.append(prev)
    id_to_token = model.vocab.id_to_token
    return DecodeResult(token_ids=tuple(out_ids),
                        tokens=tuple(id_to_token[i] for i in out_ids),
                        steps=tuple(steps), ended_with_eos=ended)


# ---------------------------------------------------------------------------
# Reasoning-path readout


@dataclass(frozen=True)
class InferredPath:
    start: str
    triples: tuple             # SELF_LOOP steps inside the walk included
    probability: float

    def hops(self) -> int:
        return len(self.triples)


def infer_path(adj: AdjacencyTensor, rhat: np.ndarray, s: np.ndarray,
               entity: str, n_hops: int) -> InferredPath:
    """Highest-probability walk of exactly n_hops ending at the entity.

    Max-product dynamic program over the same transition structure the
    decoder sums over; ties break toward the smallest (relation index,
    entity index) step sequence, starts toward the smallest entity
    index. Trailing self-loop steps are dropped from the reported
    triples; their weights stay in the probability.
    """
    n = adj.n_entities
    if rhat.shape != (n, adj.n_relations):
        raise ModelError("path matrix shape mismatch")
    target = adj.entity_index(entity)
    # dp[v] = (prob, key) with key = (start index, ((rel, ent), ...))
    dp: dict[int, tuple] = {}
    for v in np.flatnonzero(s > 0.0):
        dp[int(v)] = (float(s[v]), (int(v), ()))
    if not dp:
        raise ModelError("source vector is empty")
    for _ in range(n_hops):
        ndp: dict[int, tuple] = {}
        for h, r, t, w in zip(adj.head, adj.rel, adj.tail, adj.weight):
            h, r, t = int(h), int(r), int(t)
            cur = dp.get(h)
            if cur is None:
                continue
            prob = cur[0] * float(rhat[h, r]) * float(w)
            if prob <= 0.0:
                continue
            key = (cur[1][0], cur[1][1] + ((r, t),))
            best = ndp.get(t)
            if best is None or (-prob, key) < (-best[0], best[1]):
                ndp[t] = (prob, key)
        dp = ndp
    if target not in dp:
        raise ModelError(f"entity {entity!r} unreachable in {n_hops} hops")
    prob, (start, steps) = dp[target]
    while steps and steps[-1][0] == adj.self_index:
        steps = steps[:-1]
    triples = []
    here = start
    for r, t in steps:
        rel = adj.relations[r]
        triples.append(Triple(adj.entities[here], rel, adj.entities[t]))
        here = t
    return InferredPath(start=adj.entities[start], triples=tuple(triples),
                        probability=prob)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    history: list              # one dict per epoch, JSON-ready
    best_val_ppl: float
    epochs_run: int
    unreachable_total: int


def _corpus_nll(model: QadptModel, examples: Sequence[Example]) -> tuple:
    total = 0.0
    tokens = 0
    floor = model.hyper.prob_floor
    for ex in examples:
        res = teacher_force(model, ex)
        total += -float(np.sum(np.log(np.maximum(res.gold_probs, floor))))
        tokens += len(res.gold_probs)
    return total, tokens


def validation_perplexity(model: QadptModel, examples: Sequence[Example]) -> float:
    total, tokens = _corpus_nll(model, examples)
    if tokens == 0:
        raise ModelError("no validation tokens")
    return float(np.exp(total / tokens))


def _run_phase(model: QadptModel, phase: str, train_ex, val_ex, state,
               rng, history, log_fh, baseline_best: float | None) -> tuple:
    hyper = model.hyper
    best_ppl = np.inf if baseline_best is None else baseline_best
    best_params = None if baseline_best is None else model.copy_params()
    bad = 0
    epochs = 0
    unreachable_total = 0
    for epoch in range(1, hyper.max_epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(len(train_ex))
        total_nll = 0.0
        total_tokens = 0
        norms = []
        epoch_unreachable = 0
        for lo in range(0, len(order), hyper.batch_size):
            batch = [train_ex[int(i)] for i in order[lo:lo + hyper.batch_size]]
            try:
                tape, loss, n_tok, unreach = batch_loss(model, batch)
                grads = param_grads(model, tape, loss)
            except KernelError as exc:
                raise KernelError(
                    f"training diverged in phase {phase}, epoch {epoch}: {exc}"
                ) from exc
            norms.append(numkernel.clip_global_norm(grads, hyper.clip_norm))
            numkernel.adam_update(model.params, grads, state, hyper.lr)
            total_nll += float(tape.value(loss)) * n_tok
            total_tokens += n_tok
            epoch_unreachable += unreach
        train_loss = total_nll / total_tokens
        val_ppl = validation_perplexity(model, val_ex)
        record = {
            "phase": phase, "epoch": epoch,
            "train_loss": train_loss, "train_ppl": float(np.exp(train_loss)),
            "val_loss": float(np.log(val_ppl)), "val_ppl": val_ppl,
            "grad_norm": float(np.mean(norms)),
            "unreachable_targets": epoch_unreachable,
            "seconds": time.monotonic() - t0,
        }
        history.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
        epochs += 1
        unreachable_total += epoch_unreachable
        if val_ppl < best_ppl:
            best_ppl = val_ppl
            best_params = model.copy_params()
            bad = 0
        else:
            bad += 1
            if bad > hyper.patience:
                break
    if best_params is not None:
        model.params = best_params
    return best_ppl, epochs, unreachable_total


def train(model: QadptModel, train_examples: Sequence[Example],
          val_examples: Sequence[Example],
          log_path=None) -> TrainResult:
    """Adam with global-norm clipping and per-epoch seeded shuffling.
    Early stopping watches validation perplexity; the best-validation
    parameters are restored at the end of each phase. With fine_tune
    set, a second phase continues on the entity-bearing subset."""
    if not train_examples or not val_examples:
        raise ModelError("train and validation sets must be nonempty")
    hyper = model.hyper
    rng = np.random.default_rng(hyper.seed)
    history: list = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        state = numkernel.AdamState.create(model.params)
        best, epochs, unreach = _run_phase(
            model, "main", train_examples, val_examples, state, rng,
            history, log_fh, baseline_best=None)
        if hyper.fine_tune:
            ft_train = [e for e in train_examples if e.has_entity]
            ft_val = [e for e in val_examples if e.has_entity] or list(val_examples)
            if not ft_train:
                logger.warning("fine-tune requested but no entity-bearing "
                               "training turns; skipping phase")
            else:
                # phase 2 may only improve on what phase 1 already
                # scores on the restricted validation set
                state2 = numkernel.AdamState.create(model.params)
                baseline = validation_perplexity(model, ft_val)
                best, e2, u2 = _run_phase(
                    model, "fine_tune", ft_train, ft_val, state2, rng,
                    history, log_fh, baseline_best=baseline)
                epochs += e2
                unreach += u2
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(history=history, best_val_ppl=float(best),
                       epochs_run=epochs, unreachable_total=unreach)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: QadptModel, path) -> None:
    """Atomic write of magic + length-prefixed JSON header + raw <f8
    payload. The header carries hyperparameters, the vocabulary, a named
    tensor manifest with shapes and byte offsets, and a payload digest."""
    names = sorted(model.params)
    chunks = []
    manifest = []
    offset = 0
    for name in names:
        arr = model.params[name]
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "hyper": model.hyper.to_dict(),
        "vocab": model.vocab.to_dict(),
        "manifest": manifest,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> QadptModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = len(CHECKPOINT_MAGIC)
    if blob[:m] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(blob) < m + 8:
        raise CheckpointError(f"{path}: truncated header length at offset {m}")
    (head_len,) = struct.unpack("<Q", blob[m:m + 8])
    head_end = m + 8 + head_len
    if head_end > len(blob):
        raise CheckpointError(f"{path}: truncated header at offset {m + 8}")
    try:
        header = json.loads(blob[m + 8:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header at offset {m + 8}: "
                              f"{exc}") from None
    payload = blob[head_end:]
    for key in ("hyper", "vocab", "manifest", "sha256", "payload_bytes"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes at offset {head_end}, "
            f"header promises {header['payload_bytes']}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch at offset "
                              f"{head_end}")
    try:
        hyper = Hyperparams(**header["hyper"])
        vocab = Vocabulary.from_dict(header["vocab"])
    except (TypeError, ModelError, DataError) as exc:
        raise CheckpointError(f"{path}: bad header contents: {exc}") from None
    params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past "
                                  f"the payload at offset {head_end + start}")
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=start).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
    try:
        return QadptModel(hyper, vocab, params)
    except ModelError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Evaluation orchestration: per-turn records that the metric functions
# consume, and the perturb-and-redecode protocol.


@dataclass
class TurnRecord:
    turn_id: str
    target_ids: tuple
    target_tokens: tuple
    gold_probs: tuple
    argmax_ids: tuple
    unreachable: int
    generated_ids: tuple
    generated_tokens: tuple
    paths: tuple               # InferredPath per emitted entity token

    def to_dict(self) -> dict:
        return {
            "turn_id": self.turn_id,
            "target_ids": list(self.target_ids),
            "target_tokens": list(self.target_tokens),
            "gold_probs": list(self.gold_probs),
            "argmax_ids": list(self.argmax_ids),
            "unreachable": self.unreachable,
            "generated_ids": list(self.generated_ids),
            "generated_tokens": list(self.generated_tokens),
            "paths": [{"start": p.start,
                       "triples": [list(t) for t in p.triples],
                       "probability": p.probability} for p in self.paths],
        }


def _decode_paths(model: QadptModel, example: Example,
                  decode: DecodeResult) -> tuple:
    if model.kind != "qadpt":
        return ()
    paths = []
    vocab = model.vocab
    for tid, step in zip(decode.token_ids, decode.steps):
        if vocab.is_entity_id(tid):
            paths.append(infer_path(example.adj, step.path_matrix,
                                    example.source_vec,
                                    vocab.id_to_token[tid],
                                    model.hyper.n_hops))
    return tuple(paths)


def evaluate_turns(model: QadptModel, examples: Sequence[Example],
                   max_len: int | None = None, workers: int = 1) -> list:
    """Teacher-forced and free-running records for each turn."""
    def one(ex: Example) -> TurnRecord:
        tf = teacher_force(model, ex)
        dec = greedy_decode(model, ex, max_len=max_len)
        return TurnRecord(
            turn_id=ex.turn_id, target_ids=ex.target_ids,
            target_tokens=ex.target_tokens, gold_probs=tf.gold_probs,
            argmax_ids=tf.argmax_ids, unreachable=tf.unreachable,
            generated_ids=dec.token_ids, generated_tokens=dec.tokens,
            paths=_decode_paths(model, ex, dec))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, examples))
    return [one(ex) for ex in examples]


@dataclass
class PerturbedTurn:
    turn_id: str
    original_tokens: tuple
    perturbed_tokens: tuple
    hypothesis: frozenset
    removed_tails: frozenset   # perturbation-target entities (last1/last2)
    edits: tuple
    skipped: bool              # no usable path, turn left unperturbed


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _grounding_paths(ex: Example, max_hops: int = 4) -> list:
    """Directed subgraph paths from the message entities to each gold
    response entity. Stands in for reasoning paths on models that do
    not infer any, so graph edits still have something to aim at."""
    targets = {t for t in ex.target_tokens if t in ex.subgraph.entities}
    out_edges: dict = {}
    for t in ex.subgraph.triples:
        out_edges.setdefault(t.head, []).append(t)
    paths = []

    def walk(node: str, trail: tuple) -> None:
        if node in targets and trail:
            paths.append(trail)
        if len(trail) == max_hops:
            return
        seen = {node} | {t.head for t in trail}
        for edge in out_edges.get(node, ()):
            if edge.tail not in seen:
                walk(edge.tail, trail + (edge,))

    for src in ex.raw_sources:
        if src in ex.subgraph.entities:
            walk(src, ())
    return paths


def perturb_and_decode(model: QadptModel, examples: Sequence[Example],
                       mode: str, seed: int,
                       pool: Sequence[str] | None = None,
                       max_len: int | None = None) -> list:
    """Decode every turn, perturb its subgraph per the chosen protocol,
    re-decode against the edited graph, and report both outputs.

    Paths for last1/last2 are the model's own inferred reasoning paths
    for the entities it emitted; the no-graph baseline has none, so its
    edits follow the gold grounding paths instead. Turns without a
    usable path keep their graph and are flagged skipped. The
    substitute pool defaults to the global entity vocabulary.
    """
    if mode not in ("all", "last1", "last2"):
        raise ModelError(f"unknown perturbation mode {mode!r}")
    pool = sorted(pool) if pool is not None else list(model.vocab.entities)
    originals = []
    paths_per_turn = []
    for ex in examples:
        dec = greedy_decode(model, ex, max_len=max_len)
        originals.append(dec)
        if model.kind == "qadpt":
            paths_per_turn.append(
                [p.triples for p in _decode_paths(model, ex, dec)])
        else:
            paths_per_turn.append(_grounding_paths(ex))

    results: list[PerturbedTurn] = []
    if mode == "all":
        batch = perturb_all([ex.subgraph for ex in examples], seed)
        perturbations = [(ex, res) for ex, res in zip(examples, batch)]
    else:
        need = 1 if mode == "last1" else 2
        perturb = perturb_last1 if mode == "last1" else perturb_last2
        perturbations = []
        for i, ex in enumerate(examples):
            paths = [p for p in paths_per_turn[i] if len(p) >= need]
            if not paths:
                perturbations.append((ex, None))
                continue
            perturbations.append(
                (ex, perturb(ex.subgraph, paths, _child_seed(seed, i), pool)))

    for (ex, res), dec in zip(perturbations, originals):
        if res is None or (mode != "all" and not res.edits):
            results.append(PerturbedTurn(
                turn_id=ex.turn_id, original_tokens=dec.tokens,
                perturbed_tokens=dec.tokens, hypothesis=frozenset(),
                removed_tails=frozenset(), edits=(), skipped=True))
            continue
        new_graph = res.graph
        adj = model.adjacency(new_graph)
        s = build_source_vector(model.vocab, ex.raw_sources, new_graph.entities)
        new_ex = dataclasses.replace(ex, subgraph=new_graph, adj=adj,
                                     source_vec=s)
        dec2 = greedy_decode(model, new_ex, max_len=max_len)
        results.append(PerturbedTurn(
            turn_id=ex.turn_id, original_tokens=dec.tokens,
            perturbed_tokens=dec2.tokens, hypothesis=res.hypothesis,
            removed_tails=frozenset(old.tail for old, _ in res.edits),
            edits=res.edits, skipped=False))
    return results
