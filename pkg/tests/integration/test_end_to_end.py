import csv
import json

import httpx
import pytest

from src.agentps.checkpoint import load_checkpoint
from src.agentps.cli import main

TINY_TOML = """\
[dataset]
n_samples = 48
image_size = 8
test_size = 12
seed = 3

[model]
d_enc = 8
d_model = 16
n_layers = 1
n_heads = 2
mlp_ratio = 2
max_seq_len = 64

[train]
epochs = 1
batch_size = 16
lr = 1e-3

[ablation]
seeds = 1
"""


@pytest.fixture
def run(tmp_path, monkeypatch):
    """Config file plus a run directory; no credential and no .env in reach."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("AGENTPS_ANNOTATOR_API_KEY", raising=False)
    monkeypatch.delenv("AGENTPS_ANNOTATOR_URL", raising=False)
    config = tmp_path / "run.toml"
    config.write_text(TINY_TOML, encoding="utf-8")
    out = tmp_path / "run"

    def cli(*args: str) -> int:
        command, *rest = args
        return main([command, "--config", str(config), "--out", str(out), *rest])

    cli.out = out
    return cli


@pytest.fixture
def offline(monkeypatch):
    """Any HTTP request fails the test."""

    async def refuse(self, request, **kwargs):  # noqa: D401
        raise AssertionError(f"unexpected network request to {request.url}")

    monkeypatch.setattr(httpx.AsyncClient, "send", refuse)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def test_pipeline(run, offline, capsys):
    """generate -> annotate -> train -> eval -> ablate on a tiny run directory."""
    out = run.out

    assert run("generate") == 0
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert (manifest["n_train"], manifest["n_test"]) == (36, 12)
    assert (out / "config.toml").read_text(encoding="utf-8") == TINY_TOML
    assert len((out / "data" / "train.jsonl").read_text(encoding="utf-8").splitlines()) == 36

    assert run("annotate", "--mode", "simulated") == 0
    annotations = (out / "annotations" / "simulated.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(annotations) == 36
    assert json.loads(annotations[0])["source"] == "simulated"

    assert run("train", "--variant", "agentps") == 0
    checkpoint = out / "checkpoints" / "agentps.ckpt"
    assert load_checkpoint(checkpoint).epoch == 1

    assert run("train", "--variant", "agentps", "--labels", "simulated") == 0
    assert (out / "checkpoints" / "agentps-simulated.ckpt").exists()

    capsys.readouterr()
    assert run("eval", "--checkpoint", str(checkpoint)) == 0
    assert "f1=" in capsys.readouterr().out
    with (out / "reports" / "agentps-metrics.csv").open(encoding="utf-8", newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["variant"] == "agentps"
    assert "r@p70" in row and "p@r50" in row
    scores = (out / "reports" / "agentps-scores.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(scores) == 12

    assert run("ablate") == 0
    summary = json.loads((out / "reports" / "summary.json").read_text(encoding="utf-8"))
    assert sorted(row["arm"] for row in summary["rows"]) == ["agentps", "multitask", "vanilla"]
    assert "agentps-vanilla" in summary["gaps"]["36"]


def test_resume_appends_epochs(run):
    assert run("generate") == 0
    assert run("train", "--variant", "multitask") == 0
    assert run("train", "--variant", "multitask", "--resume", "--set", "train.epochs=2") == 0

    assert load_checkpoint(run.out / "checkpoints" / "multitask.ckpt").epoch == 2
    rows = (run.out / "logs" / "multitask-epochs.csv").read_text(encoding="utf-8").splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]


def test_manifest_regenerates_identical_data(run, tmp_path):
    assert run("generate") == 0
    again = tmp_path / "again"
    code = main(["generate", "--out", str(again), "--from-manifest", str(run.out / "manifest.json")])
    assert code == 0
    for name in ("train.jsonl", "test.jsonl"):
        assert (again / "data" / name).read_bytes() == (run.out / "data" / name).read_bytes()


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------


def test_generate_refuses_to_overwrite(run):
    assert run("generate") == 0
    assert run("generate") == 1
    assert run("generate", "--force") == 0


def test_config_errors_exit_1(run):
    assert run("generate", "--set", "dataset.bogus=1") == 1
    assert run("generate", "--set", "no-equals-sign") == 1
    assert run("generate", "--set", "dataset.test_size=48") == 1
    with pytest.raises(SystemExit) as info:
        main(["train", "--variant", "transformer"])
    assert info.value.code == 1


def test_missing_inputs_exit_2(run):
    assert run("train") == 2
    assert run("eval", "--checkpoint", str(run.out / "checkpoints" / "nope.ckpt")) == 2


def test_corrupt_checkpoint_exits_2(run):
    assert run("generate") == 0
    bad = run.out / "checkpoints" / "bad.ckpt"
    bad.parent.mkdir(parents=True, exist_ok=True)
    bad.write_bytes(b"AGPSCKPT" + b"\x00" * 4)
    assert run("eval", "--checkpoint", str(bad)) == 2


def test_remote_annotation_without_credential_exits_1(run, offline):
    assert run("generate") == 0
    assert run("annotate", "--mode", "remote") == 1
    assert not (run.out / "annotations" / "remote.jsonl").exists()


def test_empty_test_set_exits_2(run):
    no_test = ["--set", "dataset.test_size=0", "--set", 'ablation.variants=["vanilla"]']
    assert run("generate", *no_test) == 0
    assert (run.out / "data" / "test.jsonl").read_text(encoding="utf-8") == ""
    assert run("train", "--variant", "vanilla", *no_test) == 0
    checkpoint = run.out / "checkpoints" / "vanilla.ckpt"
    assert run("eval", "--checkpoint", str(checkpoint), *no_test) == 2
    assert run("ablate", *no_test) == 2
