import hashlib
import json

import numpy as np
import pytest
import yaml

from ervae import experiment
from ervae.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, main
from ervae.embedding import EmbeddingFn
from ervae.errors import TrainingError
from ervae.nn import init_mlp

TINY = {
    "seeds": [0, 1],
    "rows": ["vae_dim1", "manifold_proj_f", "vae_dim2"],
    "dataset": {"n_train": 256, "n_eval": 64},
    "train": {"epochs": 3, "batch_size": 64},
    "eval": {"n_mc": 4, "n_eval_points": 32},
}


def _cfg(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_default_shape_and_hash(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "----- BEGIN GEN-DATA -----" in out and "----- END GEN-DATA -----" in out
    train_csv = tmp_path / "a" / "data" / "train.csv"
    table = np.loadtxt(train_csv, delimiter=",", skiprows=1)
    assert table.shape == (10000, 101)
    assert main(["gen-data", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert _sha(train_csv) == _sha(tmp_path / "b" / "data" / "train.csv")
    noisy = _cfg(tmp_path, {"dataset": {"noise_std": 0.01}})
    assert main(["gen-data", "--config", noisy, "--out", str(tmp_path / "c")]) == EXIT_OK
    assert _sha(train_csv) != _sha(tmp_path / "c" / "data" / "train.csv")


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("ERVAE_OUT", str(tmp_path / "env"))
    cfg = _cfg(tmp_path, {"dataset": {"n_train": 10, "n_eval": 5}})
    assert main(["gen-data", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "env" / "data" / "eval.csv").exists()
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "data" / "eval.csv").exists()


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["gen-data", "--config", _cfg(tmp_path, {"dataset": {"size": 3}})]) == EXIT_CONFIG
    assert "dataset.size" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG
    assert main(["run-experiment", "--workers", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG


def test_unwritable_output_exit_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = _cfg(tmp_path, {"dataset": {"n_train": 10, "n_eval": 5}})
    assert main(["gen-data", "--config", cfg, "--out", str(blocker / "sub")]) == EXIT_CONFIG


def test_show_config_applies_seed_override(tmp_path, capsys):
    assert main(["show-config", "--seed-override", "9"]) == EXIT_OK
    shown = yaml.safe_load(capsys.readouterr().out.split("-----")[2].split("\n", 1)[1])
    assert shown["seeds"] == [9] and shown["dataset"]["seed"] == 9 and shown["wae"]["seed"] == 9


def test_untrained_wae_fails_certification(tmp_path):
    cfg = _cfg(tmp_path, {"wae": {"epochs": 0}})
    assert main(["train-wae", "--config", cfg, "--out", str(tmp_path)]) == EXIT_VERIFY
    assert (tmp_path / experiment.CERT_FILE).exists()
    assert not (tmp_path / experiment.EMBEDDING_FILE).exists()


def test_wae_training_reproducible(tmp_path):
    cfg = _cfg(tmp_path, {"wae": {"epochs": 3, "n_prior_samples": 1024}})
    for name in ("a", "b"):
        main(["train-wae", "--config", cfg, "--out", str(tmp_path / name)])
    hashes = [json.loads((tmp_path / n / experiment.CERT_FILE).read_text())["embedding_hash"] for n in "ab"]
    assert hashes[0] == hashes[1]


def test_run_experiment_report_and_plots(tmp_path, capsys):
    cfg = _cfg(tmp_path, TINY)
    assert main(["run-experiment", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "----- BEGIN TABLE -----" in out and "VAE, dim Z = 2" in out
    records = experiment.load_records(tmp_path)
    assert len(records) == 6 and all(r.status == "ok" for r in records)
    summary = json.loads((tmp_path / "runs" / "vae_dim2__seed1" / "summary.json").read_text())
    assert summary["n_eval"] == 32 and len(summary["history"]) == 3
    assert (tmp_path / "runs" / "vae_dim2__seed1" / "metrics.csv").read_text().startswith("epoch,elbo,recon,kl")
    assert main(["report", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    figures = sorted(p.name for p in (tmp_path / "figures").glob("*.png"))
    assert figures == ["embeddings.png", "table.png", "training_curves.png"]
    assert all((tmp_path / "figures" / f).read_bytes()[:4] == b"\x89PNG" for f in figures)
    assert main(["plot-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert any((tmp_path / "plot_data").glob("*.csv"))


def test_full_row_set_reports_every_ordering_check(tmp_path, learned_embedding):
    learned_embedding.save(tmp_path / experiment.EMBEDDING_FILE)
    raw = {**TINY, "rows": list(experiment.TABLE_ROWS), "seeds": [0], "train": {"epochs": 1, "batch_size": 128}}
    assert main(["run-experiment", "--config", _cfg(tmp_path, raw), "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert [c["id"] for c in report["ordering_checks"]] == ["a", "b", "c", "c", "c", "d"]
    assert len(report["rows"]) == 5


def test_failed_run_is_recorded_others_continue(tmp_path, monkeypatch):
    real_train = experiment.train

    def flaky(model, train_x, cfg, rng, batches=None):
        if model.variant == "manifold_proj_f":
            raise TrainingError("loss became non-finite", checkpoint={}, epoch=1)
        return real_train(model, train_x, cfg, rng, batches)

    monkeypatch.setattr(experiment, "train", flaky)
    assert main(["run-experiment", "--config", _cfg(tmp_path, TINY), "--out", str(tmp_path)]) == EXIT_NUMERIC
    records = experiment.load_records(tmp_path)
    assert [r.status for r in records].count("failed") == 2
    assert sum(r.status == "ok" for r in records) == 4
    assert "2 failed" in (tmp_path / "report.txt").read_text()


def _verify_cfg(tmp_path, emb_path):
    return _cfg(tmp_path, {"verify": {"n_samples": 2000, "n_grad_probes": 2, "embedding": str(emb_path)}},
                "verify.yaml")


def _failed_checks(out):
    payload = json.loads((out / "verification.json").read_text())
    assert not payload["passed"]
    return " ".join(c["name"] for c in payload["checks"] if not c["passed"])


def test_verify_rejects_collapsed_embedding(tmp_path):
    dec = init_mlp([1, 8, 2], "tanh", np.random.default_rng(0), init="zeros")
    path = tmp_path / "collapsed.json"
    EmbeddingFn("learned_wae", 1, 2, dec.freeze()).save(path)
    assert main(["verify", "--config", _verify_cfg(tmp_path, path), "--out", str(tmp_path)]) == EXIT_VERIFY
    assert "immersion" in _failed_checks(tmp_path)


def test_verify_rejects_corrupted_bytes(tmp_path, learned_embedding):
    path = tmp_path / "emb.json"
    learned_embedding.save(path)
    blob = bytearray(path.with_suffix(".bin").read_bytes())
    blob[10] ^= 0x40
    path.with_suffix(".bin").write_bytes(bytes(blob))
    assert main(["verify", "--config", _verify_cfg(tmp_path, path), "--out", str(tmp_path)]) == EXIT_VERIFY
    assert "checkpoint" in _failed_checks(tmp_path)


def test_no_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
