import csv
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from stemgen.cli import REGIME_ORDER, main, regime
from stemgen.config import AblateConfig, RunConfig, stream_seed
from stemgen.evaluation import DESCRIPTORS
from stemgen.toyworld import MASK, ConfigError, read_grids

SMALL = """
seed = 3
[synth]
n_train_songs = 40
n_test_songs = 12
[codec]
corpus_songs = 40
max_frames = 4000
[train]
steps = 40
eval_every = 20
[eval]
n_examples = 30
[ablate]
lambdas = [1.0, 3.0]
w_s = [0.0, 0.1]
n_examples = 30
"""

STAGES = [["synth"], ["train"], ["generate"], ["eval"], ["eval", "--ref-vs-ref"], ["ablate"]]


def run(cfg_path, out, *args):
    return main([*args, "--config", str(cfg_path), "--out", str(out)])


def files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    snaps = []
    for name in ("a", "b"):
        out = root / name
        per_stage = {}
        for stage in STAGES:
            assert run(cfg, out, *stage) == 0, stage
            per_stage[" ".join(stage)] = files(out)
        snaps.append(per_stage)
    return root, snaps


@pytest.mark.parametrize("stage", [" ".join(s) for s in STAGES])
def test_stage_outputs_byte_identical(runs, stage):
    _, (a, b) = runs
    assert a[stage].keys() == b[stage].keys()
    for name in a[stage]:
        assert a[stage][name] == b[stage][name], name


def test_expected_files(runs):
    root, _ = runs
    names = set(files(root / "a"))
    for f in ["songs_train.jsonl", "songs_test.jsonl", "codec.json", "pairs.bin",
              "checkpoint.stgc", "metrics.csv", "generated.bin", "contexts.bin", "manifest.csv",
              "generated_frames.npy", "mix_frames.npy", "report.csv", "report_ref_vs_ref.csv",
              "ablation_cells.csv", "ablation_guidance.csv", "ablation_causal_bias.csv"]:
        assert f in names


def test_generate_count_and_categories(runs):
    root, _ = runs
    grids, K = read_grids(root / "a" / "generated.bin")
    assert grids.shape == (30, 4, 32)
    assert not (grids == MASK).any() and grids.max() < K
    with open(root / "a" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30
    frames = np.load(root / "a" / "generated_frames.npy")
    assert frames.shape == (30, 32, 13)
    # the requested conditioning comes from the eval stream; re-derive it independently
    from stemgen.cli import eval_examples
    from stemgen.toyworld import ToyCodec, read_songs
    cfg = RunConfig.from_toml(SMALL)
    examples = eval_examples(cfg, read_songs(root / "a" / "songs_test.jsonl"),
                             ToyCodec.load(root / "a" / "codec.json"), 30)
    assert Counter(int(r["category"]) for r in rows) == Counter(e.category for e in examples)


def read_report(path):
    with open(path) as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}


def test_eval_report_contents(runs):
    root, _ = runs
    rep = read_report(root / "a" / "report.csv")
    assert set(rep) == set(DESCRIPTORS) | {"mirdd", "frechet"}
    assert rep["mirdd"] == pytest.approx(np.mean([rep[n] for n in DESCRIPTORS]))
    same = read_report(root / "a" / "report_ref_vs_ref.csv")
    assert same["mirdd"] == 0.0
    assert same["frechet"] == pytest.approx(0.0, abs=1e-6)


def test_ablation_tables(runs):
    root, _ = runs
    a = root / "a"
    with open(a / "ablation_causal_bias.csv") as fh:
        head = fh.readline().strip().split(",")
    assert head == ["w_s", "0.0", "0.1"]
    with open(a / "ablation_guidance.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["regime"] for r in rows] == REGIME_ORDER
    assert [int(r["cells"]) for r in rows] == [1, 1, 1, 1]


def test_default_ablation_grid():
    a = AblateConfig()
    assert a.w_s == [0.0, 0.1, 0.2, 0.5]
    assert a.lambdas == [1.0, 2.0, 3.0, 4.0]
    cells = [(la, li) for la in a.lambdas for li in a.lambdas]
    groups = Counter(regime(la, li) for la, li in cells)
    assert groups == {REGIME_ORDER[0]: 1, REGIME_ORDER[1]: 3, REGIME_ORDER[2]: 3, REGIME_ORDER[3]: 9}


def test_metrics_log(runs):
    root, _ = runs
    with open(root / "a" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(1, 41))
    assert list(rows[0]) == ["step", "loss", "heldout_accuracy", "lr"]


def test_resume_matches_uninterrupted(runs, tmp_path, capsys):
    root, _ = runs
    cfg = root / "small.toml"
    out = tmp_path / "r"
    out.mkdir()
    for f in ("songs_train.jsonl", "songs_test.jsonl", "codec.json", "pairs.bin"):
        (out / f).write_bytes((root / "a" / f).read_bytes())
    assert run(cfg, out, "train", "--steps", "25") == 0
    assert "p_drop=0.1" in capsys.readouterr().out
    assert run(cfg, out, "train", "--resume", str(out / "checkpoint.stgc")) == 0
    assert (out / "metrics.csv").read_bytes() == (root / "a" / "metrics.csv").read_bytes()
    assert (out / "checkpoint.stgc").read_bytes() == (root / "a" / "checkpoint.stgc").read_bytes()


def test_synth_three_stems(tmp_path, capsys):
    cfg = tmp_path / "m3.toml"
    cfg.write_text(SMALL.replace("[synth]", "[synth.gen]\nn_stems = 3\n[synth]")
                   .replace("n_train_songs = 40", "n_train_songs = 90")
                   .replace("n_test_songs = 12", "n_test_songs = 10"))
    assert run(cfg, tmp_path / "o", "synth") == 0
    text = capsys.readouterr().out
    assert "100 songs with M=3 stems: 9 (context, target) combinations" in text


def test_single_stem_config_rejected(tmp_path, capsys):
    cfg = tmp_path / "m1.toml"
    cfg.write_text(SMALL.replace("[synth]", "[synth.gen]\nn_stems = 1\n[synth]"))
    assert run(cfg, tmp_path / "o", "synth") == 2
    assert "config error" in capsys.readouterr().err


def test_missing_seed_rejected(tmp_path):
    cfg = tmp_path / "noseed.toml"
    cfg.write_text(SMALL.replace("seed = 3\n", ""))
    assert run(cfg, tmp_path / "o", "synth") == 2
    assert main(["synth", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("text", ["seed = 1\n[model]\nbogus = 2\n", "seed = 1\n[ablate]\nlambdas = [5.0]\n",
                                  "seed = 1\n[model]\nK = 32\n", "seed = [1\n"])
def test_bad_configs(tmp_path, text):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    assert run(cfg, tmp_path / "o", "synth") == 2


def test_runtime_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL)
    assert run(cfg, tmp_path / "empty", "generate") == 3


def test_generate_rejects_mismatched_checkpoint(runs, tmp_path):
    root, _ = runs
    out = tmp_path / "m"
    out.mkdir()
    for f in ("songs_test.jsonl", "codec.json", "checkpoint.stgc"):
        (out / f).write_bytes((root / "a" / f).read_bytes())
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL.replace("[synth]", "[synth]\ncrop_frames = 16").replace(
        "[train]", "[model]\nT = 16\n[train]"))
    assert run(cfg, out, "generate") == 2


def test_config_round_trip():
    cfg = RunConfig.from_toml(SMALL)
    again = RunConfig.from_toml(cfg.to_toml())
    assert again == cfg
    assert RunConfig.from_toml(again.to_toml()).to_toml() == cfg.to_toml()


def test_config_requires_seed():
    with pytest.raises(ConfigError):
        RunConfig().validate()


def test_seed_streams_independent():
    names = ["synth", "codec", "pairs", "train", "sample", "eval"]
    seeds = {stream_seed(7, n) for n in names}
    assert len(seeds) == len(names)
    assert stream_seed(7, "sample") == stream_seed(7, "sample")
    assert stream_seed(7, "sample", 1) != stream_seed(7, "sample")
