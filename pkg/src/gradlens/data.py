"""Corpus ingestion, deterministic word-level tokenization, vocabularies,
and bundled synthetic corpora (procedurally generated stand-ins for the
acceptability / review / clinical-note workloads).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^a-z0-9'\s]")

TASKS = ("classification", "next_token")


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace; punctuation becomes its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list  # index -> token string; PAD=0, UNK=1 always present
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DomainError("vocabulary must start with PAD, UNK")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @staticmethod
    def from_json(text: str) -> "Vocabulary":
        return Vocabulary(tokens=json.loads(text))


@dataclass
class Corpus:
    examples: list  # (text, label-or-None)
    task: str
    context_length: int
    name: str = "corpus"

    def __post_init__(self):
        if self.task not in TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if self.task == "classification":
            if any(lab not in (0, 1) for _, lab in self.examples):
                raise DomainError("classification corpora carry labels in {0, 1}")
        elif any(lab is not None for _, lab in self.examples):
            raise DomainError("next_token corpora carry no labels")

    def texts(self) -> list:
        return [text for text, _ in self.examples]


def build_vocab(corpus: Corpus, max_size: int) -> Vocabulary:
    """Top (max_size - 2) tokens by frequency; ties broken lexicographically."""
    if max_size < 3:
        raise DomainError("vocabulary size must be at least 3")
    if not corpus.examples:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text, _ in corpus.examples:
        counts.update(tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 2]]
    return Vocabulary(tokens=[PAD_TOKEN, UNK_TOKEN] + kept, counts=dict(counts))


def encode(text: str, vocab: Vocabulary, n: int):
    """Token ids padded/truncated to n, plus the real-token mask."""
    if n < 1:
        raise DomainError("context length must be >= 1")
    ids = [vocab.id_of(tok) for tok in tokenize(text)][:n]
    mask = [1] * len(ids)
    while len(ids) < n:
        ids.append(PAD)
        mask.append(0)
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64)


def decode_ids(ids, vocab: Vocabulary, strip_pad: bool = True) -> str:
    toks = [vocab.tokens[int(i)] for i in ids]
    if strip_pad:
        toks = [t for t in toks if t != PAD_TOKEN]
    return " ".join(toks)


def load_corpus(path, task: str, context_length: int, name: str | None = None) -> Corpus:
    """One example per line; classification lines are `text<TAB>label`."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if task == "classification":
                parts = line.rsplit("\t", 1)
                if len(parts) != 2:
                    raise DataError("expected `text<TAB>label`", line=lineno)
                text, lab = parts
                if lab not in ("0", "1"):
                    raise DataError(f"label must be 0 or 1, got {lab!r}", line=lineno)
                examples.append((text, int(lab)))
            else:
                examples.append((line, None))
    if not examples:
        raise DataError(f"no examples in {path}")
    return Corpus(examples=examples, task=task, context_length=context_length,
                  name=name or str(path))


def save_corpus(corpus: Corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for text, lab in corpus.examples:
            fh.write(text if lab is None else f"{text}\t{lab}")
            fh.write("\n")


# ---------------------------------------------------------------------------
# Bundled synthetic corpora
# ---------------------------------------------------------------------------

_ACCEPTABILITY_SUBJECTS = [
    "the cat", "a child", "the teacher", "my neighbor", "the pilot",
    "every student", "the gardener", "an actor", "the judge", "her brother",
]
_ACCEPTABILITY_VERBS = [
    "reads", "paints", "fixes", "sells", "admires", "watches", "carries",
    "forgets", "finds", "borrows",
]
_ACCEPTABILITY_OBJECTS = [
    "the book", "a letter", "the fence", "old maps", "fresh bread",
    "the violin", "two chairs", "the garden", "a ticket", "small stones",
]
_SCRAMBLERS = [
    lambda s, v, o: f"{v} {s} {o}",
    lambda s, v, o: f"{o} {s} {v}",
    lambda s, v, o: f"{s} {o} {v}",
]

_REVIEW_OPENERS = [
    "a delightful surprise", "an uneven effort", "a tense thriller",
    "a warm family story", "a hollow spectacle", "a sharp comedy",
    "a slow meditation", "a bold experiment", "a tired sequel",
    "an honest documentary",
]
_REVIEW_QUALITIES = [
    "with vivid performances", "with clumsy dialogue", "with stunning visuals",
    "with a wandering plot", "with real emotional weight", "with cheap twists",
    "with patient direction", "with flat characters", "with a striking score",
    "with generous humor",
]
_REVIEW_VERDICT_POS = [
    "and it earns every minute", "and the ending lands perfectly",
    "and the cast shines throughout", "and it rewards close attention",
    "and i would watch it again",
]
_REVIEW_VERDICT_NEG = [
    "but it overstays its welcome", "but the ending falls flat",
    "but the cast looks stranded", "but nothing here feels earned",
    "but i checked the clock twice",
]

_CLINICAL_SERVICES = ["cardiology", "neurology", "pediatrics", "oncology", "surgery"]
_CLINICAL_SUBJECTS = [
    "patient", "the infant", "the resident", "this gentleman", "this woman",
]
_CLINICAL_EVENTS = [
    "admitted for observation after", "transferred to the unit following",
    "evaluated at triage for", "monitored overnight after", "discharged home following",
]
_CLINICAL_FINDINGS = [
    "a brief febrile episode", "stable vital signs", "mild respiratory distress",
    "an uncomplicated procedure", "persistent chest discomfort",
    "a negative sepsis workup", "improving renal function", "controlled blood pressure",
]
_CLINICAL_PLANS = [
    "plan to continue current medication", "plan to repeat labs in the morning",
    "family updated at bedside", "follow up scheduled with the clinic",
    "no acute events overnight",
]


def synthetic_acceptability(lines: int = 1000, seed: int = 101) -> Corpus:
    """Short sentences labeled acceptable (1) or scrambled (0); n = 32."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(lines):
        s = _ACCEPTABILITY_SUBJECTS[rng.integers(len(_ACCEPTABILITY_SUBJECTS))]
        v = _ACCEPTABILITY_VERBS[rng.integers(len(_ACCEPTABILITY_VERBS))]
        o = _ACCEPTABILITY_OBJECTS[rng.integers(len(_ACCEPTABILITY_OBJECTS))]
        if rng.random() < 0.5:
            examples.append((f"{s} {v} {o}", 1))
        else:
            scramble = _SCRAMBLERS[rng.integers(len(_SCRAMBLERS))]
            examples.append((scramble(s, v, o), 0))
    return Corpus(examples, "classification", 32, name="synthetic-acceptability")


def synthetic_review(lines: int = 1000, seed: int = 202) -> Corpus:
    """Movie-review style sentences with sentiment labels; n = 128."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(lines):
        opener = _REVIEW_OPENERS[rng.integers(len(_REVIEW_OPENERS))]
        quality = _REVIEW_QUALITIES[rng.integers(len(_REVIEW_QUALITIES))]
        positive = rng.random() < 0.5
        pool = _REVIEW_VERDICT_POS if positive else _REVIEW_VERDICT_NEG
        verdict = pool[rng.integers(len(pool))]
        examples.append((f"{opener} {quality} {verdict}", int(positive)))
    return Corpus(examples, "classification", 128, name="synthetic-review")


def synthetic_clinical(lines: int = 1000, seed: int = 303) -> Corpus:
    """Clinical-note style next-token lines; n = 256."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(lines):
        service = _CLINICAL_SERVICES[rng.integers(len(_CLINICAL_SERVICES))]
        subject = _CLINICAL_SUBJECTS[rng.integers(len(_CLINICAL_SUBJECTS))]
        event = _CLINICAL_EVENTS[rng.integers(len(_CLINICAL_EVENTS))]
        finding = _CLINICAL_FINDINGS[rng.integers(len(_CLINICAL_FINDINGS))]
        plan = _CLINICAL_PLANS[rng.integers(len(_CLINICAL_PLANS))]
        examples.append((f"{service} note {subject} {event} {finding} {plan}", None))
    return Corpus(examples, "next_token", 256, name="synthetic-clinical")


_BUNDLED = {
    "acceptability": synthetic_acceptability,
    "review": synthetic_review,
    "clinical": synthetic_clinical,
}


def synthetic_corpus(name: str, lines: int = 1000) -> Corpus:
    if name not in _BUNDLED:
        raise DomainError(f"unknown bundled corpus {name!r}; have {sorted(_BUNDLED)}")
    return _BUNDLED[name](lines=lines)


def word_salad_corpus(lines: int, words_per_line: int, pool_size: int, seed: int,
                      context_length: int, task: str = "next_token") -> Corpus:
    """Uniform random word sequences over a small pool; used by desk-scale
    experiments where the token distribution must be simple and collision-poor."""
    rng = np.random.default_rng(seed)
    pool = [f"w{idx:02d}" for idx in range(pool_size)]
    examples = []
    for _ in range(lines):
        idx = rng.choice(pool_size, size=words_per_line, replace=False)
        text = " ".join(pool[i] for i in idx)
        label = int(rng.integers(0, 2)) if task == "classification" else None
        examples.append((text, label))
    return Corpus(examples, task, context_length, name=f"word-salad-{pool_size}")
