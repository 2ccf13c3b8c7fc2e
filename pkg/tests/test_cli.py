import json

import numpy as np
import pytest

from lgvq import cli
from lgvq.config import load_config


@pytest.fixture(scope="module")
def trained(toy_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = cli.main(["train", "--manifest", str(toy_manifest), "--set", "steps=4", "--set", "checkpoint_every=2",
                     "--set", "codebook_size=16", "--out", str(out)])
    assert code == 0
    return out


def test_train_outputs(trained):
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3, 4]
    names = sorted(p.name for p in (trained / "checkpoints").iterdir())
    assert names == ["final.pt", "step_000002.pt", "step_000004.pt"]
    cfg = load_config(trained / "config.txt")
    assert cfg.steps == 4 and cfg.codebook_size == 16
    assert (trained / "vocab.txt").read_text().startswith("# lgvq vocabulary v1")


def test_resolved_config_reproduces_run(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "config.txt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_resume_appends(trained, tmp_path):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(trained, run)
    code = cli.main(["train", "--checkpoint", str(run / "checkpoints" / "step_000002.pt"), "--out", str(run)])
    assert code == 0
    lines = (run / "metrics.jsonl").read_text().splitlines()
    # two appended records repeat steps 3 and 4 exactly
    assert lines[4:] == lines[2:4]
    assert cli.main(["train", "--checkpoint", str(run / "checkpoints" / "final.pt"), "--set", "alpha=0",
                     "--out", str(run)]) == 2


def test_config_errors_exit_2(capsys, toy_manifest, tmp_path):
    code = cli.main(["train", "--manifest", str(toy_manifest), "--set", "bogus=1", "--set", "lr=fast",
                     "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "lr" in err
    assert cli.main(["train", "--out", str(tmp_path)]) == 2


def test_data_errors_exit_3(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 3
    (tmp_path / "bad.pt").write_bytes(b"junk")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "bad.pt")]) == 3


def test_divergence_exits_4(toy_manifest, tmp_path, monkeypatch):
    import lgvq.train as tr

    monkeypatch.setattr(tr, "vq_loss", lambda *a, **k: tr.torch.tensor(float("nan")))
    code = cli.main(["train", "--manifest", str(toy_manifest), "--set", "steps=2", "--out", str(tmp_path)])
    assert code == 4
    assert (tmp_path / "checkpoints" / "last_good.pt").exists()


def test_eval_report(trained, tmp_path, capsys):
    ck = str(trained / "checkpoints" / "final.pt")
    assert cli.main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "a")]) == 0
    first = json.loads(capsys.readouterr().out)
    assert cli.main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "b")]) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert set(first) == {"psnr_db", "codebook_usage_pct", "codebook_perplexity", "recall_at_1",
                          "retrieval_top1", "sim_mse"}
    assert all(np.isfinite(v) for v in first.values())
    saved = json.loads((tmp_path / "a" / "report.json").read_text())
    assert saved == first
    records = [json.loads(x) for x in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert {r["metric"]: r["value"] for r in records} == first


def test_eval_empty_manifest(trained, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = cli.main(["eval", "--checkpoint", str(trained / "checkpoints" / "final.pt"), "--manifest", str(empty),
                     "--out", str(tmp_path / "r")])
    assert code == 3
    assert capsys.readouterr().out == ""
    assert not (tmp_path / "r" / "report.json").exists()


def test_diagnose_files_round_trip(trained, tmp_path):
    ck = str(trained / "checkpoints" / "final.pt")
    assert cli.main(["diagnose", "--checkpoint", ck, "--out", str(tmp_path), "--item", "2"]) == 0
    words, w = cli.load_matrix(tmp_path / "word_similarity.csv")
    words2, c = cli.load_matrix(tmp_path / "code_similarity.csv")
    assert words == words2 and w.shape == (len(words), len(words))
    np.testing.assert_allclose(np.diag(w), 1.0, atol=1e-12)
    np.testing.assert_allclose(w, w.T, atol=1e-6)
    np.testing.assert_allclose(c, c.T, atol=1e-6)
    for name in ("word_similarity.png", "code_similarity.png", "code_usage.png", "code_usage.csv"):
        assert (tmp_path / name).stat().st_size > 0
    usage = (tmp_path / "code_usage.csv").read_text().splitlines()
    assert usage[0] == "code,count" and len(usage) == 17


def test_matrix_file_round_trip_exact(tmp_path):
    m = np.random.default_rng(0).uniform(-1, 1, (3, 3))
    cli.save_matrix(tmp_path / "m.csv", ["x", "y", "z"], m)
    labels, back = cli.load_matrix(tmp_path / "m.csv")
    assert labels == ["x", "y", "z"] and np.array_equal(back, m)


def test_dump_codebook(trained, tmp_path):
    assert cli.main(["dump-codebook", "--checkpoint", str(trained / "checkpoints" / "final.pt"),
                     "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("code_*.png"))) == 16
    assert (tmp_path / "codebook_grid.png").exists()
