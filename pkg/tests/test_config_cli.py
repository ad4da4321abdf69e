import json

import pytest
from PIL import Image

from countgan.cli import main
from countgan.config import RunConfig, parse_exclusions
from countgan.errors import InvalidConfig
from countgan.training import TrainConfig

from conftest import MNIST_DIR

TINY_TRAIN = ["train.epochs=1", "train.batch_size=16", "train.latent_dim=8", "train.growth_rate=4",
              "train.base_channels=8", "train.disc_channels=4,8,8,8"]
TINY_DATA = [f"data.glyphs={MNIST_DIR}", "mnist.class_subset=0,1", "mnist.max_count=1",
             "mnist.images_per_combination=4", "mnist.resolution=16,16", "mnist.glyph_scale=0.5"]


def sets(items):
    return [a for kv in items for a in ("--set", kv)]


# --------------------------------------------------------------------------- config

def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_text("seed = 4\ntrain.epochs = 3  # short\nmnist.class_subset = 0,1\n")
    assert cfg.section("train") == TrainConfig(epochs=3, seed=4)
    path = cfg.write(tmp_path)
    back = RunConfig.load(path)
    assert back.to_text() == cfg.to_text()
    assert back.hash() == cfg.hash()
    assert path.read_text().startswith(f"# config_hash = {cfg.hash()}\n")


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(InvalidConfig):
        RunConfig.from_text("train.epochz = 3\n")
    with pytest.raises(InvalidConfig):
        RunConfig.from_text("train.epochs = many\n")
    with pytest.raises(InvalidConfig):
        RunConfig.from_text("just words\n")
    with pytest.raises(InvalidConfig):
        RunConfig.from_text("train.seed = 3\n")  # seeds come from the top-level key


def test_config_precedence_and_hash():
    base = RunConfig.from_text("train.epochs = 3\n")
    over = base.override(["train.epochs=5"])
    assert base.get("train.epochs") == 3 and over.get("train.epochs") == 5
    assert base.hash() != over.hash()
    moved = over.override(["output_dir=/elsewhere"])
    assert moved.hash() == over.hash()


def test_parse_exclusions():
    assert parse_exclusions("3:1;2:2") == [(3, 1), (2, 2)]
    assert parse_exclusions("") == []
    with pytest.raises(InvalidConfig):
        parse_exclusions("3-1")


# --------------------------------------------------------------------------- cli

def test_unknown_flag_exits_1_without_output(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["dataset", "gen-mnist", "--out", str(out), "--bogus"]) == 1
    assert not out.exists()
    assert "--bogus" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["dataset", "gen-mnist", "--out", str(out), "--set", "mnist.nope=1"]) == 1
    assert not out.exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-mnist, then train, run once for the CLI tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "gen-mnist", "--out", str(root / "data"), "--seed", "2", *sets(TINY_DATA)]) == 0
    assert main(["train", "--manifest", str(root / "data"), "--out", str(root / "run"), *sets(TINY_TRAIN)]) == 0
    return root


def test_gen_mnist_outputs_and_idempotence(pipeline, tmp_path):
    data = pipeline / "data"
    assert (data / "manifest.jsonl").exists() and (data / "run.cfg").exists()
    assert len((data / "manifest.jsonl").read_text().splitlines()) == 1 + 16  # header + items
    cfg = RunConfig.load(data / "run.cfg")
    assert cfg.seed == 2 and cfg.get("mnist.max_count") == 1
    assert main(["dataset", "gen-mnist", "--out", str(tmp_path / "again"), "--seed", "2", *sets(TINY_DATA)]) == 0
    assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == (data / "manifest.jsonl").read_bytes()


def test_split_command(pipeline, tmp_path):
    assert main(["dataset", "split", "--manifest", str(pipeline / "data"), "--exclude", "1:1",
                 "--mode", "extrapolation", "--out", str(tmp_path)]) == 0
    n_train = len((tmp_path / "train" / "manifest.jsonl").read_text().splitlines())
    n_held = len((tmp_path / "heldout" / "manifest.jsonl").read_text().splitlines())
    assert (n_train, n_held) == (1 + 8, 1 + 8)
    assert main(["dataset", "split", "--manifest", str(pipeline / "data"), "--exclude", "1:0",
                 "--mode", "extrapolation", "--out", str(tmp_path / "bad")]) == 1


def test_train_writes_checkpoint_metrics_and_config(pipeline):
    run = pipeline / "run"
    assert (run / "checkpoint.pt").exists()
    records = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert records[-1]["type"] == "epoch"
    assert RunConfig.load(run / "run.cfg").get("train.epochs") == 1


def test_sample_contact_sheet(pipeline, tmp_path):
    ck = str(pipeline / "run" / "checkpoint")
    assert main(["sample", "--checkpoint", ck, "--counts", "1,0", "--counts", "1,1", "--n", "3",
                 "--out", str(tmp_path)]) == 0
    with Image.open(tmp_path / "samples.png") as im:
        assert im.size == (3 * 32, 2 * (32 + 12))
    assert main(["sample", "--checkpoint", ck, "--counts", "1,0,1", "--out", str(tmp_path / "x")]) == 1
    assert main(["sample", "--checkpoint", ck, "--counts", "2,0", "--out", str(tmp_path / "x")]) == 1


def test_eval_command(pipeline, tmp_path, capsys):
    ck = str(pipeline / "run" / "checkpoint")
    args = ["eval", "--checkpoint", ck, "--manifest", str(pipeline / "data"), "--out", str(tmp_path),
            "--set", "predictor.epochs=1", "--set", "predictor.channels=4,8,8,8",
            "--set", "eval.samples_per_count=3", "--set", "eval.fid=false"]
    assert main(args) == 0
    assert "count_mse=" in capsys.readouterr().out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["provenance"]["sample_count"] == 12
    assert (tmp_path / "judge.pt").exists() and (tmp_path / "histograms.csv").exists()


def test_runtime_failure_exits_2(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "missing"), "--counts", "1,1",
                 "--out", str(tmp_path)]) == 2


def test_plot_command(pipeline, tmp_path):
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(pipeline / "run" / "checkpoint"), "--manifest",
                 str(pipeline / "data"), "--out", str(ev), "--set", "predictor.epochs=1",
                 "--set", "predictor.channels=4,8,8,8", "--set", "eval.samples_per_count=2",
                 "--set", "eval.fid=false"]) == 0
    table = tmp_path / "ablation.csv"
    table.write_text("variant,seed,count_mse\nfull,0,0.125\nw/o count loss,0,1.5\n")
    assert main(["plot", "--metrics", str(ev / "metrics.json"), "--table", str(table),
                 "--out", str(tmp_path / "fig")]) == 0
    for name in ("histograms.png", "ablation.png"):
        with Image.open(tmp_path / "fig" / name) as im:
            assert im.size[0] > 50 and im.size[1] > 20
    assert main(["plot", "--out", str(tmp_path / "none")]) == 1
