"""Federated fine-tuning simulation: corpus partitioning, per-round local
steps, adversarial gradient capture, and DP-style defenses.

The attack-facing artifact is the `CapturedUpdate` stream: post-defense
gradient snapshots keyed by an opaque batch fingerprint.  Plaintext
references for evaluation travel on a separate channel (`references`) that
the attack modules never receive.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import data as dt
from . import model as md
from .errors import DataError, DomainError

DEFAULT_LEARNING_RATE = 1e-3


@dataclass(frozen=True)
class DefenseSpec:
    noise_sigma: float = 0.0
    clip_bound: float | None = None  # global L2 norm bound; None = no clipping
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise DomainError("clip_bound must be positive when present")
        if self.noise_sigma == 0.0 and self.clip_bound is None:
            raise DomainError("active defense needs noise_sigma > 0 or a clip bound")


@dataclass(frozen=True)
class FederationSpec:
    num_clients: int
    partition_seed: int
    local_batch_size: int
    rounds: int
    attack_round: int | str = 0  # round index, or "random"
    defense: DefenseSpec | None = None
    learning_rate: float = DEFAULT_LEARNING_RATE

    def __post_init__(self):
        if self.num_clients < 1 or self.local_batch_size < 1 or self.rounds < 1:
            raise DomainError("num_clients, local_batch_size, rounds must be >= 1")
        if self.attack_round != "random" and not (
            isinstance(self.attack_round, int) and 0 <= self.attack_round < self.rounds
        ):
            raise DomainError("attack_round must be 'random' or a round index < rounds")

    def resolve_attack_round(self) -> int:
        if self.attack_round == "random":
            rng = np.random.default_rng([self.partition_seed, 0xA77AC])
            return int(rng.integers(self.rounds))
        return int(self.attack_round)


@dataclass
class CapturedUpdate:
    """What the adversary sees: one client's post-defense gradients.

    `batch_fingerprint` is a hash of the private batch; only the metrics
    module uses it, to pair reconstructions with references.
    """

    client_id: int
    round: int
    snapshot: md.GradientSnapshot
    batch_fingerprint: str
    model_hash: str

    def to_jsonable(self) -> dict:
        return {
            "client_id": self.client_id,
            "round": self.round,
            "batch_fingerprint": self.batch_fingerprint,
            "model_hash": self.model_hash,
            "snapshot": self.snapshot.to_jsonable(),
        }

    @staticmethod
    def from_jsonable(d: dict) -> "CapturedUpdate":
        return CapturedUpdate(
            client_id=d["client_id"],
            round=d["round"],
            snapshot=md.GradientSnapshot.from_jsonable(d["snapshot"]),
            batch_fingerprint=d["batch_fingerprint"],
            model_hash=d["model_hash"],
        )


def partition(corpus: dt.Corpus, spec: FederationSpec) -> list:
    """Seeded disjoint shards covering the corpus; sizes differ by at most 1."""
    n = len(corpus.examples)
    if n < spec.num_clients:
        raise DataError(f"{n} examples cannot cover {spec.num_clients} clients")
    rng = np.random.default_rng(spec.partition_seed)
    order = rng.permutation(n)
    shards = [[] for _ in range(spec.num_clients)]
    for pos, idx in enumerate(order):
        shards[pos % spec.num_clients].append(corpus.examples[int(idx)])
    return shards


def batch_fingerprint(batch: md.BatchInput) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.token_ids).tobytes())
    h.update(np.ascontiguousarray(batch.attention_mask).tobytes())
    if batch.labels is not None:
        h.update(np.ascontiguousarray(batch.labels).tobytes())
    return h.hexdigest()


def local_batch(shard: list, round_index: int, batch_size: int,
                vocab: dt.Vocabulary, context_length: int, task: str) -> md.BatchInput:
    """The client's batch for a round: examples taken cyclically from its shard."""
    rows, masks, labels = [], [], []
    for i in range(batch_size):
        text, label = shard[(round_index * batch_size + i) % len(shard)]
        ids, mask = dt.encode(text, vocab, context_length)
        rows.append(ids)
        masks.append(mask)
        labels.append(label)
    has_labels = task == "classification"
    return md.BatchInput(
        token_ids=np.stack(rows),
        attention_mask=np.stack(masks),
        labels=np.array(labels, dtype=np.int64) if has_labels else None,
    )


def apply_defense(snapshot: md.GradientSnapshot, defense: DefenseSpec,
                  entropy: tuple = ()) -> md.GradientSnapshot:
    """Clip the concatenated gradient to the global bound, then add Gaussian
    noise (DP-SGD order).  `entropy` extends the noise seed per capture."""
    entries = {k: v.copy() for k, v in snapshot.entries.items()}
    if defense.clip_bound is not None:
        norm = snapshot.global_norm()
        scale = min(1.0, defense.clip_bound / norm) if norm > 0 else 1.0
        entries = {k: v * scale for k, v in entries.items()}
    if defense.noise_sigma > 0:
        rng = np.random.default_rng([defense.seed, *map(int, entropy)])
        for k in entries:
            entries[k] = entries[k] + rng.normal(0.0, defense.noise_sigma, size=entries[k].shape)
    return md.GradientSnapshot(
        entries=entries,
        batch_size=snapshot.batch_size,
        seq_len=snapshot.seq_len,
        loss_value=snapshot.loss_value,
    )


def client_step(state: md.ModelState, spec: md.ModelSpec, batch: md.BatchInput) -> md.GradientSnapshot:
    _, tape = md.forward(state, spec, batch)
    return md.backward(tape)


def run_round(state: md.ModelState, model_spec: md.ModelSpec, fed: FederationSpec,
              shards: list, round_index: int, vocab: dt.Vocabulary,
              context_length: int, task: str):
    """One synchronous round: every client computes one local gradient.

    Returns (captures, references, transmitted) where `captures` are the
    post-defense `CapturedUpdate`s, `references` maps fingerprints to the
    plaintext batch (evaluation-only), and `transmitted` are the snapshots
    the server aggregates (identical to the captured ones).
    """
    if round_index >= fed.rounds:
        raise DomainError("round index past the configured horizon")
    mhash = md.state_hash(state)
    captures, transmitted = [], []
    references = {}
    for client_id, shard in enumerate(shards):
        batch = local_batch(shard, round_index, fed.local_batch_size, vocab,
                            context_length, task)
        snap = client_step(state, model_spec, batch)
        if fed.defense is not None:
            snap = apply_defense(snap, fed.defense, entropy=(round_index, client_id))
        fp = batch_fingerprint(batch)
        captures.append(CapturedUpdate(client_id, round_index, snap, fp, mhash))
        transmitted.append(snap)
        references[fp] = {
            "texts": [dt.decode_ids(row[mask.astype(bool)], vocab)
                      for row, mask in zip(batch.token_ids, batch.attention_mask)],
            "token_ids": [row[mask.astype(bool)].tolist()
                          for row, mask in zip(batch.token_ids, batch.attention_mask)],
            "labels": batch.labels.tolist() if batch.labels is not None else None,
        }
    return captures, references, transmitted


def aggregate_step(state: md.ModelState, transmitted: list, lr: float) -> md.ModelState:
    """FedSGD: descend along the mean of the transmitted gradients."""
    new_params = dict(state.params)
    for name in transmitted[0].entries:
        mean_grad = sum(s.entries[name] for s in transmitted) / len(transmitted)
        new_params[name] = new_params[name] - lr * mean_grad
    return md.ModelState(
        spec=state.spec,
        embed_table=state.embed_table,
        pos_table=state.pos_table,
        params=new_params,
    )


@dataclass
class SimulationResult:
    captures: list  # CapturedUpdate at the attack round
    references: dict  # fingerprint -> plaintext record (evaluation channel)
    final_state: md.ModelState
    attacked_state: md.ModelState  # global model at the attacked round
    attack_round: int


def simulate(corpus: dt.Corpus, fed: FederationSpec, model_spec: md.ModelSpec,
             state: md.ModelState, vocab: dt.Vocabulary,
             context_length: int | None = None) -> SimulationResult:
    """Run the full horizon; capture every client's update at the attack round."""
    n = context_length or corpus.context_length
    shards = partition(corpus, fed)
    attack_round = fed.resolve_attack_round()
    captures, references, attacked_state = [], {}, state
    for r in range(fed.rounds):
        round_caps, round_refs, transmitted = run_round(
            state, model_spec, fed, shards, r, vocab, n, corpus.task
        )
        if r == attack_round:
            captures = round_caps
            references = round_refs
            attacked_state = state
        state = aggregate_step(state, transmitted, fed.learning_rate)
    return SimulationResult(
        captures=captures,
        references=references,
        final_state=state,
        attacked_state=attacked_state,
        attack_round=attack_round,
    )


# ---------------------------------------------------------------------------
# Persistence (newline-delimited JSON)
# ---------------------------------------------------------------------------


def save_captures(captures: list, path):
    with open(path, "w", encoding="utf-8") as fh:
        for cap in captures:
            fh.write(json.dumps(cap.to_jsonable(), sort_keys=True))
            fh.write("\n")


def load_captures(path) -> list:
    captures = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                captures.append(CapturedUpdate.from_jsonable(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise DataError(f"bad capture record: {exc}", line=lineno)
    return captures


def save_references(references: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        for fp in sorted(references):
            fh.write(json.dumps({"fingerprint": fp, **references[fp]}, sort_keys=True))
            fh.write("\n")


def load_references(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec.pop("fingerprint")] = rec
    return out
