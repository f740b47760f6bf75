"""Command-line orchestration: simulate -> attack -> report, plus selftest.

A single TOML config drives everything; every run writes a manifest tying
the artifacts to config/model/corpus hashes.  Exit codes: 0 success,
1 usage error, 2 data/hash error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import attack_order as ao
from . import attack_token as at
from . import data as dt
from . import fedsim as fs
from . import metrics as mt
from . import model as md
from .errors import (DataError, DomainError, GradlensError, HashMismatchError,
                     NumericalError, UsageError)

log = logging.getLogger("gradlens")

# Headline defaults: 100 attack iterations, gamma 0.4 (0.35 under PEFT) and
# eta 0.2 resolved inside AttackConfig, LoRA rank 32 / adapter bottleneck 32,
# context lengths carried by the bundled corpora (32 / 128 / 256).
DEFAULTS = {
    "attack": {"iterations": 100},
    "peft": {"lora_rank": 32, "adapter_bottleneck": 32},
}


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config parse error in {path}: {exc}")


def _config_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _require(cfg: dict, section: str, key: str):
    if section not in cfg:
        raise UsageError(f"config missing [{section}] section")
    if key not in cfg[section]:
        raise UsageError(f"config missing {section}.{key}")
    return cfg[section][key]


def _model_spec_from_config(cfg: dict) -> md.ModelSpec:
    m = cfg.get("model", {})
    head_kind = m.get("head", "next_token")
    peft = None
    if "peft" in m:
        p = m["peft"]
        kind = p.get("kind")
        if kind == "lora":
            peft = md.PeftSpec("lora", rank=p.get("rank", DEFAULTS["peft"]["lora_rank"]),
                               which=tuple(p.get("which", ("query", "value"))),
                               trainable_base=p.get("trainable_base", False))
        elif kind == "adapter":
            peft = md.PeftSpec("adapter",
                               bottleneck=p.get("bottleneck",
                                                DEFAULTS["peft"]["adapter_bottleneck"]),
                               trainable_base=p.get("trainable_base", False))
        else:
            raise UsageError(f"model.peft.kind must be lora or adapter, got {kind!r}")
    try:
        return md.ModelSpec(
            architecture=m.get("architecture", "decoder"),
            vocab_size=_require(cfg, "model", "vocab_size"),
            embed_dim=m.get("embed_dim", 32),
            hidden_dim=m.get("hidden_dim", m.get("embed_dim", 32)),
            num_layers=m.get("num_layers", 2),
            max_positions=m.get("max_positions", 64),
            ffn_dim=m.get("ffn_dim", 2 * m.get("embed_dim", 32)),
            heads=m.get("heads", 2),
            head=md.HeadSpec(head_kind, m.get("num_classes", 2)),
            peft=peft,
            layer_norm=m.get("layer_norm", False),
        )
    except DomainError as exc:
        raise UsageError(f"invalid model config: {exc}")


def _corpus_from_config(cfg: dict) -> dt.Corpus:
    d = cfg.get("data", {})
    source = d.get("corpus", "clinical")
    task = d.get("task")
    n = d.get("context_length")
    if source in ("acceptability", "review", "clinical"):
        corpus = dt.synthetic_corpus(source, lines=d.get("lines", 1000))
        if task and task != corpus.task:
            raise UsageError(f"bundled corpus {source} is a {corpus.task} corpus")
        if n:
            corpus.context_length = n
        return corpus
    if not task:
        raise UsageError("data.task required for file corpora")
    if not n:
        raise UsageError("data.context_length required for file corpora")
    try:
        return dt.load_corpus(source, task, n, name=Path(source).name)
    except FileNotFoundError:
        raise DataError(f"corpus file not found: {source}")


def _federation_from_config(cfg: dict) -> fs.FederationSpec:
    f = cfg.get("federation", {})
    defense = None
    if "defense" in cfg:
        dcfg = cfg["defense"]
        defense = fs.DefenseSpec(
            noise_sigma=dcfg.get("noise_sigma", 0.0),
            clip_bound=dcfg.get("clip_bound"),
            seed=dcfg.get("seed", 0),
        )
    try:
        return fs.FederationSpec(
            num_clients=f.get("num_clients", 1),
            partition_seed=f.get("partition_seed", 0),
            local_batch_size=f.get("local_batch_size", 1),
            rounds=f.get("rounds", 1),
            attack_round=f.get("attack_round", 0),
            defense=defense,
            learning_rate=f.get("learning_rate", fs.DEFAULT_LEARNING_RATE),
        )
    except DomainError as exc:
        raise UsageError(f"invalid federation config: {exc}")


def _attack_config(cfg: dict, args) -> at.AttackConfig:
    a = dict(cfg.get("attack", {}))
    if getattr(args, "token_count", None) is not None:
        a["token_count"] = args.token_count
    if getattr(args, "seed", None) is not None:
        a["seed"] = args.seed
    try:
        return at.AttackConfig(
            gamma=a.get("gamma"),
            eta=a.get("eta"),
            iterations=a.get("iterations", DEFAULTS["attack"]["iterations"]),
            step_size=a.get("step_size"),
            target_step_size=a.get("target_step_size", 1.0),
            seed=a.get("seed", 0),
            rank_tol=a.get("rank_tol", 1e-8),
            token_count_override=a.get("token_count"),
            label_refresh=a.get("label_refresh", 25),
            step_acceptance=a.get("step_acceptance", False),
            pool_residual_tol=a.get("pool_residual_tol", 0.15),
        )
    except DomainError as exc:
        raise UsageError(f"invalid attack config: {exc}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = _model_spec_from_config(cfg)
    fed = _federation_from_config(cfg)
    corpus = _corpus_from_config(cfg)
    model_seed = cfg.get("model", {}).get("seed", 0)
    if args.seed is not None:
        model_seed = args.seed

    vocab = dt.build_vocab(corpus, spec.vocab_size)
    state = md.init_state(spec, seed=model_seed)
    log.info("simulating: %d clients, %d rounds, corpus %s",
             fed.num_clients, fed.rounds, corpus.name)
    result = fs.simulate(corpus, fed, spec, state, vocab, corpus.context_length)

    model_path = outdir / "model.json"
    _atomic_write(model_path, md.state_to_json(result.attacked_state))
    _atomic_write(outdir / "vocab.json", vocab.to_json())
    fs.save_captures(result.captures, outdir / "captures.ndjson")
    fs.save_references(result.references, outdir / "references.ndjson")

    manifest = {
        "config_hash": _config_hash(args.config),
        "model_seed": model_seed,
        "model_spec_hash": md.spec_hash(spec),
        "model_state_hash": md.state_hash(result.attacked_state),
        "corpus": corpus.name,
        "dataset_task": corpus.task,
        "attack_round": result.attack_round,
        "batch_size": fed.local_batch_size,
        "defense": {
            "noise_sigma": fed.defense.noise_sigma if fed.defense else 0.0,
            "clip_bound": fed.defense.clip_bound if fed.defense else None,
        },
        "peft": spec_peft_label(spec),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {
            "model": "model.json",
            "vocab": "vocab.json",
            "captures": "captures.ndjson",
            "references": "references.ndjson",
        },
    }
    _atomic_write(outdir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(result.captures)} captured updates to {outdir}")
    return 0


def spec_peft_label(spec: md.ModelSpec) -> str:
    if spec.peft is None:
        return "none"
    if spec.peft.kind == "lora":
        return f"lora-r{spec.peft.rank}"
    return f"adapter-m{spec.peft.bottleneck}"


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------


def _attack_one(cap_json: str, model_text: str, vocab_text: str, cfg_kwargs: dict,
                skip_calibration: bool, index: int, manifest: dict):
    cap = fs.CapturedUpdate.from_jsonable(json.loads(cap_json))
    state = md.state_from_json(model_text)
    vocab = dt.Vocabulary.from_json(vocab_text)
    spec = state.spec
    cfg = at.AttackConfig(**cfg_kwargs)
    out = at.recover_tokens(cap, state, spec, cfg)
    calibration = None
    if skip_calibration:
        orders = [list(g) for g in out.recovered.example_token_ids]
    else:
        calibration = ao.calibrate(out.recovered, cap.snapshot, state, spec)
        orders = calibration.orders
    texts = [dt.decode_ids(seq, vocab) for seq in orders]
    result = {
        "index": index,
        "fingerprint": cap.batch_fingerprint,
        "client_id": cap.client_id,
        "round": cap.round,
        "token_ids": orders,
        "texts": texts,
        "recovered_multiset": sorted(out.recovered.token_ids),
        "scores": out.recovered.scores,
        "residuals": out.recovered.residuals,
        "label_counts": out.label_counts,
        "estimated_tokens": out.estimated_tokens,
        "configured_tokens": out.configured_tokens,
        "warnings": out.warnings + (calibration.warnings if calibration else []),
        "skip_calibration": skip_calibration,
        "config": cfg_kwargs,
        "group": {
            "dataset": manifest.get("corpus", "unknown"),
            "batch_size": cap.snapshot.batch_size,
            "defense": manifest.get("defense", {}),
            "peft": manifest.get("peft", "none"),
        },
    }
    trace_rows = out.trace
    calib_trace = calibration.trace if calibration else []
    return result, trace_rows, calib_trace


def cmd_attack(args) -> int:
    cfg = _load_config(args.config) if args.config else {}
    capture_path = Path(args.capture)
    if not capture_path.exists():
        raise DataError(f"capture file not found: {capture_path}")
    outdir = Path(args.output_dir)
    (outdir / "results").mkdir(parents=True, exist_ok=True)
    (outdir / "traces").mkdir(parents=True, exist_ok=True)

    model_path = Path(args.model) if args.model else capture_path.parent / "model.json"
    vocab_path = Path(args.vocab) if args.vocab else capture_path.parent / "vocab.json"
    manifest_path = capture_path.parent / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if not model_path.exists():
        raise DataError(f"model file not found: {model_path}")
    model_text = model_path.read_text()
    vocab_text = vocab_path.read_text()

    try:
        state = md.state_from_json(model_text)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"unreadable model document {model_path}: {exc}")
    model_hash = md.state_hash(state)
    captures = fs.load_captures(capture_path)
    for cap in captures:
        if cap.model_hash != model_hash:
            raise HashMismatchError(
                f"capture for client {cap.client_id} was taken against model "
                f"{cap.model_hash[:12]}..., but {model_path} hashes to {model_hash[:12]}..."
            )

    atk = _attack_config(cfg, args)
    cfg_kwargs = {
        "gamma": atk.gamma, "eta": atk.eta, "iterations": atk.iterations,
        "step_size": atk.step_size, "target_step_size": atk.target_step_size,
        "seed": atk.seed, "rank_tol": atk.rank_tol,
        "token_count_override": atk.token_count_override,
        "label_refresh": atk.label_refresh, "step_acceptance": atk.step_acceptance,
        "pool_residual_tol": atk.pool_residual_tol,
    }

    jobs = max(1, args.jobs)
    work = [(json.dumps(cap.to_jsonable()), model_text, vocab_text, cfg_kwargs,
             args.skip_calibration, i, manifest)
            for i, cap in enumerate(captures)]
    if jobs == 1:
        outputs = [_attack_one(*w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_attack_one_star, work))

    for i, (result, trace_rows, calib_trace) in enumerate(outputs):
        _atomic_write(outdir / "results" / f"result_{i:03d}.json",
                      json.dumps(result, indent=2, sort_keys=True))
        with open(outdir / "traces" / f"loss_{i:03d}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["iteration", "l_rec", "l_dis_sum", "null_penalty", "total"])
            writer.writeheader()
            writer.writerows(trace_rows)
        _atomic_write(outdir / "traces" / f"calib_{i:03d}.json",
                      json.dumps(calib_trace, indent=2, sort_keys=True))
    print(f"attacked {len(outputs)} captured updates -> {outdir / 'results'}")
    return 0


def _attack_one_star(w):
    return _attack_one(*w)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    results_dir = Path(args.results)
    refs = fs.load_references(Path(args.references))
    result_files = sorted(results_dir.glob("result_*.json"))
    if not result_files:
        raise DataError(f"no result files in {results_dir}")
    results = [json.loads(p.read_text()) for p in result_files]

    groups: dict = {}
    for res in results:
        g = res.get("group", {})
        defense = g.get("defense", {}) or {}
        key = (
            g.get("dataset", "unknown"),
            g.get("batch_size", 0),
            f"sigma={defense.get('noise_sigma', 0.0)},clip={defense.get('clip_bound')}",
            g.get("peft", "none"),
        )
        groups.setdefault(key, []).append(res)

    rows = []
    report_json = {}
    for key in sorted(groups, key=str):
        dataset, batch_size, defense, peft = key
        report = mt.evaluate_run(groups[key], refs)
        rows.append({
            "dataset": dataset,
            "batch_size": batch_size,
            "defense": defense,
            "peft": peft,
            "runs": len(groups[key]),
            "rouge1": f"{report.rouge1_f:.1f}",
            "rouge1_std": f"{report.rouge1_std:.1f}",
            "rouge2": f"{report.rouge2_f:.1f}",
            "rouge2_std": f"{report.rouge2_std:.1f}",
            "rougeL": f"{report.rougeL_f:.1f}",
            "rougeL_std": f"{report.rougeL_std:.1f}",
        })
        report_json[str(key)] = report.to_jsonable()

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _atomic_write(outdir / "report.json", json.dumps(report_json, indent=2, sort_keys=True))
    for row in rows:
        print(row)
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def cmd_selftest(_args) -> int:
    from . import linalg as la
    from . import tape as tp

    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures.append(name)
            print(f"FAIL {name}: {exc}")

    def qr_roundtrip():
        rng = np.random.default_rng(0)
        a = rng.normal(size=(12, 5))
        f = la.qr_decompose(a)
        assert np.linalg.norm(f.q @ f.r - a) / np.linalg.norm(a) < 1e-8

    def svd_roundtrip():
        rng = np.random.default_rng(1)
        a = rng.normal(size=(7, 9))
        f = la.svd_decompose(a)
        recon = f.u @ np.diag(f.singular_values) @ f.v.T
        assert np.linalg.norm(recon - a) / np.linalg.norm(a) < 1e-8

    def projector_complementarity():
        rng = np.random.default_rng(2)
        a = rng.normal(size=(6, 3)) @ rng.normal(size=(3, 8))
        basis = la.row_space_basis(a, 1e-8)
        p = basis @ basis.T + la.null_space_projector(a, 1e-8)
        assert np.linalg.norm(p - np.eye(8)) < 1e-8

    def partial_sum_identity():
        rng = np.random.default_rng(3)
        g = rng.normal(size=(6, 10))
        s = g.sum(axis=0)
        for k in range(1, 6):
            sk = g[:k].sum(axis=0)
            lhs = sk @ s
            rhs = sk @ sk + sk @ g[k:].sum(axis=0)
            assert abs(lhs - rhs) < 1e-12

    def finite_difference_spotcheck():
        spec = md.ModelSpec("decoder", 12, 8, 8, 1, 8, 16, 1, md.HeadSpec("next_token"))
        state = md.init_state(spec, seed=0)
        for k in state.params:
            state.params[k] = state.params[k] * 25.0
        batch = md.BatchInput(np.array([[3, 5, 7]]), np.ones((1, 3), dtype=np.int64))
        _, tape = md.forward(state, spec, batch)
        snap = md.backward(tape)
        name = "layer-0/ffn/w1"
        idx = (0, 0)
        orig = state.params[name][idx]
        state.params[name][idx] = orig + 1e-5
        hi, _ = md.forward(state, spec, batch)
        state.params[name][idx] = orig - 1e-5
        lo, _ = md.forward(state, spec, batch)
        state.params[name][idx] = orig
        fd = (hi - lo) / 2e-5
        assert abs(snap.entries[name][idx] - fd) <= max(1e-5 * abs(fd), 1e-9)

    def rank_bound():
        spec = md.ModelSpec("encoder", 24, 16, 16, 2, 8, 32, 2, md.HeadSpec("classifier", 2))
        state = md.init_state(spec, seed=3)
        batch = md.BatchInput(np.array([[2, 3, 4]]), np.ones((1, 3), dtype=np.int64),
                              labels=np.array([1]))
        _, tape = md.forward(state, spec, batch)
        snap = md.backward(tape)
        assert la.numerical_rank(snap.entries["layer-0/attn/query"], 1e-8) <= 3

    def rouge_oracle():
        assert abs(mt.rouge_l(["b", "a"], ["a", "b"]) - 50.0) < 1e-9
        assert abs(mt.rouge_n(["a", "b", "c"], ["a", "c", "d"], 1) - 200.0 / 3.0) < 1e-9

    def tape_second_order():
        x = tp.Var(np.array([1.0, -2.0, 3.0]))
        f = tp.vsum(x ** 3)
        (g1,) = tp.grad(f, [x])
        (g2,) = tp.grad(tp.vsum(g1), [x])
        assert np.allclose(g2.value, 6.0 * x.value)

    check("linalg.qr_roundtrip", qr_roundtrip)
    check("linalg.svd_roundtrip", svd_roundtrip)
    check("linalg.projector_complementarity", projector_complementarity)
    check("order.partial_sum_identity", partial_sum_identity)
    check("model.finite_difference", finite_difference_spotcheck)
    check("model.rank_bound", rank_bound)
    check("metrics.rouge_oracle", rouge_oracle)
    check("tape.second_order", tape_second_order)
    if failures:
        print(f"{len(failures)} selftest failure(s)")
        return 3
    print("all selftests passed")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradlens",
        description="Desk-scale gradient inversion laboratory for federated "
                    "transformer fine-tuning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the federated simulation and capture updates")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--output-dir", required=True)
    p_sim.add_argument("--seed", type=int, default=None, help="override model seed")
    p_sim.set_defaults(fn=cmd_simulate)

    p_atk = sub.add_parser("attack", help="reconstruct batches from captured updates")
    p_atk.add_argument("--capture", required=True)
    p_atk.add_argument("--model", default=None, help="model JSON (default: beside capture)")
    p_atk.add_argument("--vocab", default=None, help="vocab JSON (default: beside capture)")
    p_atk.add_argument("--config", default=None)
    p_atk.add_argument("--output-dir", required=True)
    p_atk.add_argument("--seed", type=int, default=None)
    p_atk.add_argument("--jobs", type=int, default=1)
    p_atk.add_argument("--skip-calibration", action="store_true")
    p_atk.add_argument("--token-count", type=int, default=None)
    p_atk.set_defaults(fn=cmd_attack)

    p_rep = sub.add_parser("report", help="aggregate ROUGE tables over results")
    p_rep.add_argument("--results", required=True)
    p_rep.add_argument("--references", required=True)
    p_rep.add_argument("--output-dir", required=True)
    p_rep.set_defaults(fn=cmd_report)

    p_self = sub.add_parser("selftest", help="run the built-in invariant battery")
    p_self.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("GRADLENS_LOG", "WARNING").upper(),
                    logging.WARNING)
    logging.basicConfig(level=level)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, HashMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except GradlensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
