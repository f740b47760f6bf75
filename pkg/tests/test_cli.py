import json

from gradlens import cli

CONFIG = """
[model]
architecture = "decoder"
vocab_size = 48
embed_dim = 24
hidden_dim = 24
num_layers = 2
max_positions = 16
ffn_dim = 48
heads = 2
head = "next_token"
seed = 3

[data]
corpus = "clinical"
lines = 60
context_length = 4

[federation]
num_clients = 2
partition_seed = 1
local_batch_size = 1
rounds = 1
attack_round = 0

[attack]
iterations = 40
seed = 0
"""

PEFT_CONFIG = CONFIG.replace(
    "[data]",
    "[model.peft]\nkind = \"lora\"\nrank = 4\n\n[data]",
)


def write_config(tmp_path, text=CONFIG):
    p = tmp_path / "config.toml"
    p.write_text(text)
    return p


def run(argv):
    return cli.main(argv)


def test_simulate_attack_report_roundtrip(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["simulate", "--config", str(cfg), "--output-dir", str(out)]) == 0
    for name in ("manifest.json", "model.json", "vocab.json",
                 "captures.ndjson", "references.ndjson"):
        assert (out / name).exists()
    assert run(["attack", "--capture", str(out / "captures.ndjson"),
                "--config", str(cfg), "--output-dir", str(out)]) == 0
    results = sorted((out / "results").glob("result_*.json"))
    assert len(results) == 2  # one per client
    first = json.loads(results[0].read_text())
    assert first["texts"] and isinstance(first["texts"][0], str)
    assert (out / "traces" / "loss_000.csv").exists()
    assert (out / "traces" / "calib_000.json").exists()
    assert run(["report", "--results", str(out / "results"),
                "--references", str(out / "references.ndjson"),
                "--output-dir", str(out)]) == 0
    report = (out / "report.csv").read_text()
    assert "rouge1" in report and "clinical" in report


def test_pipeline_determinism(tmp_path):
    cfg = write_config(tmp_path)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["simulate", "--config", str(cfg), "--output-dir", str(out)]) == 0
        assert run(["attack", "--capture", str(out / "captures.ndjson"),
                    "--config", str(cfg), "--output-dir", str(out)]) == 0
        assert run(["report", "--results", str(out / "results"),
                    "--references", str(out / "references.ndjson"),
                    "--output-dir", str(out)]) == 0
        runs.append(out)
    a, b = runs
    for rel in ("captures.ndjson", "references.ndjson", "model.json",
                "vocab.json", "report.csv", "report.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for ra in sorted((a / "results").glob("result_*.json")):
        rb = b / "results" / ra.name
        assert ra.read_bytes() == rb.read_bytes()


def test_attack_parallel_jobs_identical(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["simulate", "--config", str(cfg), "--output-dir", str(out)]) == 0
    out1, out2 = tmp_path / "serial", tmp_path / "parallel"
    assert run(["attack", "--capture", str(out / "captures.ndjson"),
                "--config", str(cfg), "--output-dir", str(out1)]) == 0
    assert run(["attack", "--capture", str(out / "captures.ndjson"),
                "--config", str(cfg), "--jobs", "2", "--output-dir", str(out2)]) == 0
    for ra in sorted((out1 / "results").glob("result_*.json")):
        assert ra.read_bytes() == (out2 / "results" / ra.name).read_bytes()


def test_skip_calibration_flag(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    run(["simulate", "--config", str(cfg), "--output-dir", str(out)])
    out_skip = tmp_path / "skip"
    assert run(["attack", "--capture", str(out / "captures.ndjson"),
                "--config", str(cfg), "--skip-calibration",
                "--output-dir", str(out_skip)]) == 0
    res = json.loads(next((out_skip / "results").glob("result_*.json")).read_text())
    assert res["skip_calibration"] is True


def test_defense_block_yields_post_defense_snapshots(tmp_path):
    cfg_clean = write_config(tmp_path)
    cfg_noisy = tmp_path / "noisy.toml"
    cfg_noisy.write_text(CONFIG + "\n[defense]\nnoise_sigma = 1e-3\nseed = 5\n")
    out_clean, out_noisy = tmp_path / "clean", tmp_path / "noisy"
    assert run(["simulate", "--config", str(cfg_clean), "--output-dir", str(out_clean)]) == 0
    assert run(["simulate", "--config", str(cfg_noisy), "--output-dir", str(out_noisy)]) == 0
    clean_caps = (out_clean / "captures.ndjson").read_text().splitlines()
    noisy_caps = (out_noisy / "captures.ndjson").read_text().splitlines()
    assert len(clean_caps) == len(noisy_caps) == 2
    assert clean_caps[0] != noisy_caps[0]
    manifest = json.loads((out_noisy / "manifest.json").read_text())
    assert manifest["defense"]["noise_sigma"] == 1e-3


def test_missing_capture_is_data_error(tmp_path):
    assert run(["attack", "--capture", str(tmp_path / "nope.ndjson"),
                "--output-dir", str(tmp_path)]) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert run(["simulate", "--config", str(tmp_path / "nope.toml"),
                "--output-dir", str(tmp_path)]) == 1


def test_hash_mismatch_is_exit_2(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    run(["simulate", "--config", str(cfg), "--output-dir", str(out)])
    other = tmp_path / "other"
    cfg2 = tmp_path / "config2.toml"
    cfg2.write_text(CONFIG.replace("seed = 3", "seed = 4"))
    run(["simulate", "--config", str(cfg2), "--output-dir", str(other)])
    assert run(["attack", "--capture", str(out / "captures.ndjson"),
                "--model", str(other / "model.json"),
                "--vocab", str(other / "vocab.json"),
                "--output-dir", str(tmp_path / "x")]) == 2


def test_peft_without_token_count_is_usage_error(tmp_path):
    cfg = write_config(tmp_path, PEFT_CONFIG)
    out = tmp_path / "run"
    assert run(["simulate", "--config", str(cfg), "--output-dir", str(out)]) == 0
    code = run(["attack", "--capture", str(out / "captures.ndjson"),
                "--config", str(cfg), "--output-dir", str(tmp_path / "x")])
    assert code == 1
    ok = run(["attack", "--capture", str(out / "captures.ndjson"),
              "--config", str(cfg), "--token-count", "4",
              "--output-dir", str(tmp_path / "y")])
    assert ok == 0


def test_selftest_passes():
    assert run(["selftest"]) == 0


def test_report_empty_results_is_data_error(tmp_path):
    (tmp_path / "results").mkdir()
    refs = tmp_path / "refs.ndjson"
    refs.write_text("")
    assert run(["report", "--results", str(tmp_path / "results"),
                "--references", str(refs), "--output-dir", str(tmp_path)]) == 2
