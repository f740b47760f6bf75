"""Desk-scale transformer with exact analytic forward and backward passes.

Supports encoder-only, decoder-only, and encoder-decoder stacks, a
classification head or a next-token head, and optional PEFT attachments
(LoRA on attention projections, bottleneck adapters after the feed-forward
sublayer).  Token and positional embedding tables are frozen per the threat
model.

The forward pass records an `ActivationTape` (the differentiation graph plus
per-linear-layer input/output handles); `backward` runs one reverse sweep and
yields a `GradientSnapshot` over exactly the trainable parameters.  For every
linear layer the weight gradient is produced literally as ``Z.T @ dY``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .errors import DomainError

ARCHITECTURES = ("encoder", "decoder", "encoder_decoder")
ATTN_ROLES = ("query", "key", "value")
PARAM_INIT_SCALE = 0.02
_LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadSpec:
    kind: str  # "classifier" | "next_token"
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("classifier", "next_token"):
            raise DomainError(f"unknown head kind {self.kind!r}")
        if self.kind == "classifier" and self.num_classes < 2:
            raise DomainError("classifier needs at least 2 classes")


@dataclass(frozen=True)
class PeftSpec:
    kind: str  # "lora" | "adapter"
    rank: int = 0  # lora rank r
    bottleneck: int = 0  # adapter bottleneck m
    which: tuple = ("query", "value")  # lora target projections, or ("all",)
    trainable_base: bool = False

    def __post_init__(self):
        if self.kind not in ("lora", "adapter"):
            raise DomainError(f"unknown peft kind {self.kind!r}")
        if self.kind == "lora":
            if self.rank < 1:
                raise DomainError("lora rank must be >= 1")
            targets = self.lora_targets()
            if not targets:
                raise DomainError("lora must target at least one projection")
        if self.kind == "adapter" and self.bottleneck < 1:
            raise DomainError("adapter bottleneck must be >= 1")

    def lora_targets(self) -> tuple:
        which = self.which
        if isinstance(which, str):
            which = (which,)
        if "all" in which:
            return ATTN_ROLES
        bad = [w for w in which if w not in ATTN_ROLES]
        if bad:
            raise DomainError(f"invalid lora targets {bad}")
        return tuple(w for w in ATTN_ROLES if w in which)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    num_layers: int
    max_positions: int
    ffn_dim: int
    heads: int = 1
    head: HeadSpec = field(default_factory=lambda: HeadSpec("next_token"))
    peft: PeftSpec | None = None
    layer_norm: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise DomainError(f"unknown architecture {self.architecture!r}")
        if self.embed_dim != self.hidden_dim:
            raise DomainError("embed_dim must equal hidden_dim")
        if self.num_layers < 1 or self.vocab_size < 2 or self.max_positions < 1:
            raise DomainError("num_layers >= 1, vocab_size >= 2, max_positions >= 1 required")
        if self.embed_dim % self.heads != 0:
            raise DomainError("heads must divide embed_dim")
        if self.peft is not None:
            limit = self.peft.rank if self.peft.kind == "lora" else self.peft.bottleneck
            if limit >= self.embed_dim:
                raise DomainError("peft rank/bottleneck must be < embed_dim")

    def stacks(self) -> list:
        """(prefix, num_layers, has_cross) for each block stack."""
        if self.architecture == "encoder_decoder":
            return [("enc", self.num_layers, False), ("dec", self.num_layers, True)]
        return [("layer", self.num_layers, False)]

    def head_width(self) -> int:
        return self.vocab_size if self.head.kind == "next_token" else self.head.num_classes


def spec_to_dict(spec: ModelSpec) -> dict:
    d = {
        "architecture": spec.architecture,
        "vocab_size": spec.vocab_size,
        "embed_dim": spec.embed_dim,
        "hidden_dim": spec.hidden_dim,
        "num_layers": spec.num_layers,
        "max_positions": spec.max_positions,
        "ffn_dim": spec.ffn_dim,
        "heads": spec.heads,
        "head": {"kind": spec.head.kind, "num_classes": spec.head.num_classes},
        "layer_norm": spec.layer_norm,
        "peft": None,
    }
    if spec.peft is not None:
        d["peft"] = {
            "kind": spec.peft.kind,
            "rank": spec.peft.rank,
            "bottleneck": spec.peft.bottleneck,
            "which": list(spec.peft.lora_targets()) if spec.peft.kind == "lora" else [],
            "trainable_base": spec.peft.trainable_base,
        }
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    peft = None
    if d.get("peft"):
        p = d["peft"]
        peft = PeftSpec(
            kind=p["kind"],
            rank=p.get("rank", 0),
            bottleneck=p.get("bottleneck", 0),
            which=tuple(p.get("which") or ("query", "value")),
            trainable_base=p.get("trainable_base", False),
        )
    return ModelSpec(
        architecture=d["architecture"],
        vocab_size=d["vocab_size"],
        embed_dim=d["embed_dim"],
        hidden_dim=d["hidden_dim"],
        num_layers=d["num_layers"],
        max_positions=d["max_positions"],
        ffn_dim=d["ffn_dim"],
        heads=d.get("heads", 1),
        head=HeadSpec(d["head"]["kind"], d["head"].get("num_classes", 2)),
        peft=peft,
        layer_norm=d.get("layer_norm", False),
    )


def spec_hash(spec: ModelSpec) -> str:
    payload = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _block_param_names(spec: ModelSpec, prefix: str, i: int, cross: bool) -> list:
    names = []
    sublayers = ["attn"] + (["cross"] if cross else [])
    lora_targets = spec.peft.lora_targets() if spec.peft and spec.peft.kind == "lora" else ()
    for sub in sublayers:
        for role in ATTN_ROLES:
            names.append(f"{prefix}-{i}/{sub}/{role}")
            if sub == "attn" and role in lora_targets:
                names.append(f"{prefix}-{i}/attn/{role}.lora_a")
                names.append(f"{prefix}-{i}/attn/{role}.lora_b")
        names.append(f"{prefix}-{i}/{sub}/out")
        if spec.layer_norm:
            names.append(f"{prefix}-{i}/{sub}/ln_gain")
            names.append(f"{prefix}-{i}/{sub}/ln_bias")
    names.append(f"{prefix}-{i}/ffn/w1")
    names.append(f"{prefix}-{i}/ffn/w2")
    if spec.peft and spec.peft.kind == "adapter":
        names.append(f"{prefix}-{i}/adapter/down")
        names.append(f"{prefix}-{i}/adapter/up")
    if spec.layer_norm:
        names.append(f"{prefix}-{i}/ffn/ln_gain")
        names.append(f"{prefix}-{i}/ffn/ln_bias")
    return names


def param_names(spec: ModelSpec) -> list:
    """All (non-frozen-table) parameter names in canonical order."""
    names = []
    for prefix, layers, cross in spec.stacks():
        for i in range(layers):
            names.extend(_block_param_names(spec, prefix, i, cross))
    names.append("head/weight")
    return names


def param_shape(spec: ModelSpec, name: str) -> tuple:
    d, f = spec.embed_dim, spec.ffn_dim
    if name == "head/weight":
        return (d, spec.head_width())
    leaf = name.split("/")[-1]
    if leaf.endswith(".lora_a"):
        return (d, spec.peft.rank)
    if leaf.endswith(".lora_b"):
        return (spec.peft.rank, d)
    if leaf in ("ln_gain", "ln_bias"):
        return (1, d)
    if leaf == "w1":
        return (d, f)
    if leaf == "w2":
        return (f, d)
    if leaf == "down":
        return (d, spec.peft.bottleneck)
    if leaf == "up":
        return (spec.peft.bottleneck, d)
    return (d, d)  # attention projections


def trainable_names(spec: ModelSpec) -> list:
    """Exactly the parameters whose gradients a client would transmit."""
    peft = spec.peft
    if peft is None or peft.trainable_base:
        return param_names(spec)
    suffixes = (".lora_a", ".lora_b") if peft.kind == "lora" else ("/down", "/up")
    return [n for n in param_names(spec) if n.endswith(suffixes)]


@dataclass
class ModelState:
    """Concrete parameter values; embed/pos tables are frozen (never in snapshots)."""

    spec: ModelSpec
    embed_table: np.ndarray  # (vocab, d), frozen
    pos_table: np.ndarray  # (P, d), frozen
    params: dict  # name -> ndarray
    frozen_tables: bool = True


def init_state(spec: ModelSpec, seed: int = 0) -> ModelState:
    """Seeded Gaussian init (scale 0.02); layer-norm gains start at 1."""
    rng = np.random.default_rng(seed)
    embed = rng.normal(0.0, PARAM_INIT_SCALE, size=(spec.vocab_size, spec.embed_dim))
    pos = rng.normal(0.0, PARAM_INIT_SCALE, size=(spec.max_positions, spec.embed_dim))
    params = {}
    for name in param_names(spec):
        shape = param_shape(spec, name)
        if name.endswith("ln_gain"):
            params[name] = np.ones(shape)
        elif name.endswith("ln_bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, PARAM_INIT_SCALE, size=shape)
    return ModelState(spec=spec, embed_table=embed, pos_table=pos, params=params)


def effective_weight(state: ModelState, layer: int, role: str, stack: str | None = None) -> np.ndarray:
    """Attention projection as applied: W, or W + A @ B when LoRA targets it.

    Adapters act downstream of the sublayer output and never alter W.
    """
    if role not in ATTN_ROLES:
        raise DomainError(f"role must be one of {ATTN_ROLES}")
    spec = state.spec
    prefix = stack or spec.stacks()[0][0]
    base = state.params[f"{prefix}-{layer}/attn/{role}"]
    peft = spec.peft
    if peft and peft.kind == "lora" and role in peft.lora_targets():
        a = state.params[f"{prefix}-{layer}/attn/{role}.lora_a"]
        b = state.params[f"{prefix}-{layer}/attn/{role}.lora_b"]
        return base + a @ b
    return base


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class BatchInput:
    token_ids: np.ndarray  # (b, n) ints in [0, vocab)
    attention_mask: np.ndarray  # (b, n) 1 on real tokens, 0 on (right) padding
    labels: np.ndarray | None = None  # (b,) class ids for classifier heads

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.token_ids.ndim != 2 or self.attention_mask.shape != self.token_ids.shape:
            raise DomainError("token_ids and attention_mask must share shape (b, n)")
        if np.any(self.attention_mask.sum(axis=1) == 0):
            raise DomainError("no example may be all padding")
        diffs = np.diff(self.attention_mask, axis=1)
        if np.any(diffs > 0):
            raise DomainError("attention_mask must be right-padded (non-increasing)")


def validate_batch(spec: ModelSpec, batch: BatchInput):
    b, n = batch.token_ids.shape
    if np.any(batch.token_ids < 0) or np.any(batch.token_ids >= spec.vocab_size):
        raise DomainError("token id out of vocabulary range")
    if n > spec.max_positions:
        raise DomainError(f"sequence length {n} exceeds max_positions {spec.max_positions}")
    if spec.head.kind == "next_token":
        if batch.labels is not None:
            raise DomainError("next_token batches carry no labels")
        if n < 2:
            raise DomainError("next-token training requires sequence length >= 2")
    else:
        if batch.labels is None:
            raise DomainError("classifier batches require labels")
        if batch.labels.shape != (b,):
            raise DomainError("labels must have shape (b,)")
        if np.any(batch.labels < 0) or np.any(batch.labels >= spec.head.num_classes):
            raise DomainError("label out of range")


def embed(state: ModelState, token_ids, positions) -> np.ndarray:
    """Input embeddings Z: row i = embed_table[token_i] + pos_table[position_i]."""
    ids = np.asarray(token_ids, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64)
    if ids.shape != pos.shape:
        raise DomainError("token_ids and positions must share shape")
    if np.any(ids < 0) or np.any(ids >= state.embed_table.shape[0]):
        raise DomainError("token id out of vocabulary range")
    if np.any(pos < 0) or np.any(pos >= state.pos_table.shape[0]):
        raise DomainError("position out of range")
    return state.embed_table[ids] + state.pos_table[pos]


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class ActivationTape:
    """Everything `backward` needs: the loss node, parameter leaves, and the
    (input, output) handles of every recorded linear layer."""

    loss: tp.Var
    params: dict  # name -> Var (trainable leaves and frozen constants)
    linear_io: dict  # name -> (z Var, y Var)
    trainable: list
    spec: ModelSpec
    batch_size: int
    seq_len: int


class _Recorder:
    def __init__(self):
        self.linear_io = {}

    def linear(self, z: tp.Var, w: tp.Var, name: str) -> tp.Var:
        y = tp.matmul(z, w)
        self.linear_io[name] = (z, y)
        return y


def param_vars(state: ModelState) -> dict:
    return {name: tp.Var(value) for name, value in state.params.items()}


def _self_attention_mask(mask_row: np.ndarray, causal: bool) -> np.ndarray:
    """(b, 1, n, n) allow matrix: key must be real; causal restricts to j <= i."""
    b, n = mask_row.shape
    allow = np.broadcast_to(mask_row[:, None, None, :], (b, 1, n, n)).copy()
    if causal:
        allow = allow * np.tril(np.ones((n, n)))[None, None, :, :]
    return allow.astype(np.float64)


def _attention(rec, params, spec, prefix, i, sub, x, kv, allow):
    """Masked softmax attention; `sub` is "attn" (self) or "cross"."""
    d, h = spec.embed_dim, spec.heads
    dh = d // h
    lora_targets = (
        spec.peft.lora_targets()
        if spec.peft and spec.peft.kind == "lora" and sub == "attn"
        else ()
    )

    def proj(src, role):
        name = f"{prefix}-{i}/{sub}/{role}"
        y = rec.linear(src, params[name], name)
        if role in lora_targets:
            a = rec.linear(src, params[f"{name}.lora_a"], f"{name}.lora_a")
            y = y + rec.linear(a, params[f"{name}.lora_b"], f"{name}.lora_b")
        return y

    q, k, v = proj(x, "query"), proj(kv, "key"), proj(kv, "value")
    b, nq = x.shape[0], x.shape[1]
    nk = kv.shape[1]

    def split(t, n):
        return tp.transpose(tp.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    scores = tp.matmul(qh, tp.transpose(kh, (0, 1, 3, 2))) / np.sqrt(dh)
    # Stable masked softmax: exact zero weight on disallowed keys.
    shift = np.max(np.where(allow > 0, scores.value, -np.inf), axis=-1, keepdims=True)
    w = tp.exp(scores - tp.Var(shift)) * tp.Var(allow)
    att = w / tp.vsum(w, axis=-1, keepdims=True)
    ctx = tp.matmul(att, vh)
    merged = tp.reshape(tp.transpose(ctx, (0, 2, 1, 3)), (b, nq, d))
    return rec.linear(merged, params[f"{prefix}-{i}/{sub}/out"], f"{prefix}-{i}/{sub}/out")


def _layer_norm(x, gain, bias):
    mu = tp.vmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tp.vmean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / tp.sqrt(var + _LN_EPS)
    d = x.shape[-1]
    return xhat * tp.reshape(gain, (1, 1, d)) + tp.reshape(bias, (1, 1, d))


def _block(rec, params, spec, prefix, i, x, allow_self, memory=None, allow_cross=None):
    x = x + _attention(rec, params, spec, prefix, i, "attn", x, x, allow_self)
    if spec.layer_norm:
        x = _layer_norm(x, params[f"{prefix}-{i}/attn/ln_gain"], params[f"{prefix}-{i}/attn/ln_bias"])
    if memory is not None:
        x = x + _attention(rec, params, spec, prefix, i, "cross", x, memory, allow_cross)
        if spec.layer_norm:
            x = _layer_norm(x, params[f"{prefix}-{i}/cross/ln_gain"], params[f"{prefix}-{i}/cross/ln_bias"])
    h1 = tp.relu(rec.linear(x, params[f"{prefix}-{i}/ffn/w1"], f"{prefix}-{i}/ffn/w1"))
    ffn_out = rec.linear(h1, params[f"{prefix}-{i}/ffn/w2"], f"{prefix}-{i}/ffn/w2")
    if spec.peft and spec.peft.kind == "adapter":
        down = tp.relu(rec.linear(ffn_out, params[f"{prefix}-{i}/adapter/down"], f"{prefix}-{i}/adapter/down"))
        ffn_out = ffn_out + rec.linear(down, params[f"{prefix}-{i}/adapter/up"], f"{prefix}-{i}/adapter/up")
    x = x + ffn_out
    if spec.layer_norm:
        x = _layer_norm(x, params[f"{prefix}-{i}/ffn/ln_gain"], params[f"{prefix}-{i}/ffn/ln_bias"])
    return x


def trunk_forward(params, spec: ModelSpec, z: tp.Var, mask_row: np.ndarray, rec: _Recorder | None = None):
    """Run the block stacks on input embeddings z (b, n, d); returns hidden states.

    For the encoder-decoder variant the same embedded sequence feeds both
    stacks (encoder bidirectional, decoder causal with cross-attention).
    """
    rec = rec if rec is not None else _Recorder()
    if spec.architecture == "encoder":
        x = z
        allow = _self_attention_mask(mask_row, causal=False)
        for i in range(spec.num_layers):
            x = _block(rec, params, spec, "layer", i, x, allow)
        return x, rec
    if spec.architecture == "decoder":
        x = z
        allow = _self_attention_mask(mask_row, causal=True)
        for i in range(spec.num_layers):
            x = _block(rec, params, spec, "layer", i, x, allow)
        return x, rec
    # encoder_decoder
    enc = z
    allow_enc = _self_attention_mask(mask_row, causal=False)
    for i in range(spec.num_layers):
        enc = _block(rec, params, spec, "enc", i, enc, allow_enc)
    dec = z
    allow_dec = _self_attention_mask(mask_row, causal=True)
    b, n = mask_row.shape
    allow_cross = np.broadcast_to(
        mask_row[:, None, None, :].astype(np.float64), (b, 1, n, n)
    ).copy()
    for i in range(spec.num_layers):
        dec = _block(rec, params, spec, "dec", i, dec, allow_dec, memory=enc, allow_cross=allow_cross)
    return dec, rec


def classifier_logits(params, hidden: tp.Var, mask_row: np.ndarray, rec: _Recorder):
    """Mean-pool real positions, ReLU (keeps the pooled features non-negative,
    which the label-recovery algebra relies on), then the head projection."""
    counts = mask_row.sum(axis=1, keepdims=True).astype(np.float64)
    pooled = tp.vsum(hidden * tp.Var(mask_row[:, :, None].astype(np.float64)), axis=1)
    pooled = pooled / tp.Var(counts)
    h = tp.relu(pooled)
    return rec.linear(h, params["head/weight"], "head/weight"), h


def lm_logits(params, hidden: tp.Var, rec: _Recorder):
    return rec.linear(hidden, params["head/weight"], "head/weight")


def sequence_loss(logits: tp.Var, targets: tp.Var | np.ndarray, weights: np.ndarray) -> tp.Var:
    """Mean cross-entropy of `logits` against target distributions.

    logits: (..., width); targets: matching one-hot or soft distributions
    (rows sum to 1); weights: (...) with 0 masking ignored positions.
    """
    shift = np.max(logits.value, axis=-1, keepdims=True)
    z = logits - tp.Var(shift)
    lse = tp.log(tp.vsum(tp.exp(z), axis=-1))
    picked = tp.vsum(tp.lift(targets) * z, axis=-1)
    ce = (lse - picked) * tp.Var(weights)
    return tp.vsum(ce) / float(weights.sum())


def one_hot(ids: np.ndarray, width: int) -> np.ndarray:
    flat = ids.reshape(-1)
    out = np.zeros((flat.size, width))
    out[np.arange(flat.size), flat] = 1.0
    return out.reshape(ids.shape + (width,))


def lm_targets_and_weights(token_ids: np.ndarray, mask_row: np.ndarray, width: int):
    """Shifted next-token targets: position t predicts token t+1 when both real."""
    targets = one_hot(token_ids[:, 1:], width)
    weights = (mask_row[:, :-1] * mask_row[:, 1:]).astype(np.float64)
    return targets, weights


def forward(state: ModelState, spec: ModelSpec, batch: BatchInput):
    """Loss plus the tape retaining every intermediate needed for backward."""
    validate_batch(spec, batch)
    b, n = batch.token_ids.shape
    positions = np.broadcast_to(np.arange(n), (b, n))
    z = tp.Var(embed(state, batch.token_ids, positions))
    params = param_vars(state)
    hidden, rec = trunk_forward(params, spec, z, batch.attention_mask)
    if spec.head.kind == "classifier":
        logits, _ = classifier_logits(params, hidden, batch.attention_mask, rec)
        targets = one_hot(batch.labels, spec.head.num_classes)
        loss = sequence_loss(logits, targets, np.ones(b))
    else:
        logits = lm_logits(params, hidden, rec)
        targets, weights = lm_targets_and_weights(batch.token_ids, batch.attention_mask, spec.vocab_size)
        if weights.sum() == 0:
            raise DomainError("no valid next-token targets in batch")
        loss = sequence_loss(logits[:, :-1, :], targets, weights)
    return float(loss.value), ActivationTape(
        loss=loss,
        params=params,
        linear_io=rec.linear_io,
        trainable=trainable_names(spec),
        spec=spec,
        batch_size=b,
        seq_len=n,
    )


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


@dataclass
class GradientSnapshot:
    """The adversary's observation: per-parameter gradients of one update."""

    entries: dict  # name -> ndarray, canonical order
    batch_size: int
    seq_len: int
    loss_value: float

    def names(self) -> list:
        return list(self.entries.keys())

    def flat(self, names: list | None = None) -> np.ndarray:
        keys = names if names is not None else self.names()
        return np.concatenate([self.entries[k].reshape(-1) for k in keys])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.entries.values())))

    def scaled(self, factor: float) -> "GradientSnapshot":
        return GradientSnapshot(
            entries={k: v * factor for k, v in self.entries.items()},
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            loss_value=self.loss_value,
        )

    def to_jsonable(self) -> dict:
        return {
            "entries": {k: _matrix_to_jsonable(v) for k, v in self.entries.items()},
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "loss_value": self.loss_value,
        }

    @staticmethod
    def from_jsonable(d: dict) -> "GradientSnapshot":
        return GradientSnapshot(
            entries={k: _matrix_from_jsonable(v) for k, v in d["entries"].items()},
            batch_size=d["batch_size"],
            seq_len=d["seq_len"],
            loss_value=d["loss_value"],
        )


def backward(tape: ActivationTape) -> GradientSnapshot:
    """Gradients over exactly the trainable parameters (frozen tables omitted)."""
    leaves = [tape.params[name] for name in tape.trainable]
    grads = tp.grad(tape.loss, leaves)
    entries = {name: g.value.copy() for name, g in zip(tape.trainable, grads)}
    return GradientSnapshot(
        entries=entries,
        batch_size=tape.batch_size,
        seq_len=tape.seq_len,
        loss_value=float(tape.loss.value),
    )


def entry_gradient_name(spec: ModelSpec) -> str:
    """Parameter whose gradient multiplies the raw input embeddings first.

    Full fine-tuning: first layer's query projection.  LoRA: that layer's
    first targeted projection's A factor (it multiplies Z directly).
    Adapter: the first block's down-projection.
    """
    prefix = spec.stacks()[0][0]
    peft = spec.peft
    if peft is None or peft.trainable_base:
        return f"{prefix}-0/attn/query"
    if peft.kind == "lora":
        targets = peft.lora_targets()
        role = "query" if "query" in targets else targets[0]
        return f"{prefix}-0/attn/{role}.lora_a"
    return f"{prefix}-0/adapter/down"


def entry_gradient_names(spec: ModelSpec) -> list:
    """All first-layer parameters whose gradients are Z^T-factored in the raw
    input embeddings.

    The query gradient alone can be structurally blind: the softmax Jacobian
    zeroes each score row's sum (losing one direction per sequence per head)
    and in causal attention position 0 attends only to itself, so its query
    row carries no gradient at all.  The key/value gradients cover those
    holes, and every block is still Z^T (something), so concatenating them
    keeps all columns inside the span of the input embeddings.
    """
    prefix = spec.stacks()[0][0]
    peft = spec.peft
    if peft is None or peft.trainable_base:
        return [f"{prefix}-0/attn/{role}" for role in ATTN_ROLES]
    if peft.kind == "lora":
        return [f"{prefix}-0/attn/{role}.lora_a" for role in peft.lora_targets()]
    return [f"{prefix}-0/adapter/down"]


def entry_gradient_matrix(snapshot: GradientSnapshot, spec: ModelSpec) -> np.ndarray:
    """Column-wise concatenation of the entry gradients (d rows)."""
    blocks = [snapshot.entries[name] for name in entry_gradient_names(spec)
              if name in snapshot.entries]
    if not blocks:
        raise DomainError("snapshot carries no first-layer entry gradient")
    return np.concatenate(blocks, axis=1)


def peft_gradient_rank_bound(snapshot: GradientSnapshot, spec: ModelSpec) -> int:
    """min(t, d, h, r): the ceiling on every PEFT-parameter gradient's rank."""
    from . import linalg as la

    if spec.peft is None:
        raise DomainError("peft_gradient_rank_bound requires an active PEFT spec")
    r = spec.peft.rank if spec.peft.kind == "lora" else spec.peft.bottleneck
    t = snapshot.batch_size * snapshot.seq_len
    bound = min(t, spec.embed_dim, spec.hidden_dim, r)
    suffixes = (".lora_a", ".lora_b", "/down", "/up")
    for name, g in snapshot.entries.items():
        if name.endswith(suffixes):
            observed = la.numerical_rank(g, la.DEFAULT_RANK_TOL)
            if observed > bound:
                raise DomainError(
                    f"{name}: observed rank {observed} exceeds bound {bound}"
                )
    return bound


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _matrix_to_jsonable(m: np.ndarray) -> dict:
    m = np.asarray(m, dtype=np.float64)
    return {
        "rows": int(m.shape[0]),
        "cols": int(m.shape[1]),
        "data": ["%.17g" % x for x in m.reshape(-1)],
    }


def _matrix_from_jsonable(d: dict) -> np.ndarray:
    data = np.array([float(x) for x in d["data"]], dtype=np.float64)
    return data.reshape(d["rows"], d["cols"])


def state_to_json(state: ModelState) -> str:
    doc = {
        "version": 1,
        "spec": spec_to_dict(state.spec),
        "frozen": {
            "embed_table": _matrix_to_jsonable(state.embed_table),
            "pos_table": _matrix_to_jsonable(state.pos_table),
        },
        "params": {name: _matrix_to_jsonable(state.params[name]) for name in param_names(state.spec)},
    }
    return json.dumps(doc, sort_keys=False, separators=(",", ":"))


def state_from_json(text: str) -> ModelState:
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise DomainError(f"unsupported model document version {doc.get('version')}")
    spec = spec_from_dict(doc["spec"])
    return ModelState(
        spec=spec,
        embed_table=_matrix_from_jsonable(doc["frozen"]["embed_table"]),
        pos_table=_matrix_from_jsonable(doc["frozen"]["pos_table"]),
        params={k: _matrix_from_jsonable(v) for k, v in doc["params"].items()},
    )


def state_hash(state: ModelState) -> str:
    return hashlib.sha256(state_to_json(state).encode()).hexdigest()
