"""Command line behaviour and exit codes."""

import json

import pytest

from abnet.cli import main
from abnet.saliency import read_patch_cache

TINY = """\
way = 2
shot = 1
queries = 1
eval_queries = 2
image_size = 16
n_patches = 2
k_affine = 2
backbone_channels = 4
comparator_channels = 3
merge_hidden = 4
synth_classes = 10
synth_images_per_class = 12
episodes = 2
log_every = 0
checkpoint_every = 0
eval_episodes = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.txt"
    cfg.write_text(TINY)
    assert main(["extract-patches", "--config", str(cfg), "--out", str(root / "p")]) == 0
    return root, cfg


def test_extract_patches_writes_one_record_per_image_and_is_idempotent(workspace):
    root, cfg = workspace
    cache = root / "p" / "patches.tsv"
    records = read_patch_cache(cache)
    assert len(records) == 120 and all(len(ps) == 2 for ps in records.values())
    first = cache.read_bytes()
    assert main(["extract-patches", "--config", str(cfg), "--out", str(root / "p")]) == 0
    assert cache.read_bytes() == first


def test_extract_from_directory_and_unreadable_root(workspace, tmp_path):
    root, cfg = workspace
    assert main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "img")]) == 0
    assert (tmp_path / "img" / "manifest.tsv").is_file()
    out = tmp_path / "dirp"
    assert main(["extract-patches", "--config", str(cfg), "--dataset-root", str(tmp_path / "img"), "--out", str(out)]) == 0
    assert read_patch_cache(out / "patches.tsv") == read_patch_cache(root / "p" / "patches.tsv")
    assert main(["extract-patches", "--config", str(cfg), "--dataset-root", str(tmp_path / "nope"), "--out", str(out)]) == 2


def test_train_without_cache_points_to_extract_patches(workspace, tmp_path, capsys):
    _, cfg = workspace
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "extract-patches" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--override", "patch_cache=/missing.tsv"]) == 1
    assert "extract-patches" in capsys.readouterr().err


def test_config_errors_are_listed_together(workspace, tmp_path, capsys):
    _, cfg = workspace
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path),
                 "--override", "way=0", "--override", "shot=-2", "--override", "nms_threshold=3"])
    assert code == 1
    assert capsys.readouterr().err.count("config error") == 3
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--override", "nonsense=1"]) == 1
    assert main(["train", "--config", str(tmp_path / "absent.txt"), "--out", str(tmp_path)]) == 2


def test_train_eval_seed_override_and_resume(workspace, tmp_path, capsys):
    root, cfg = workspace
    cache = f"patch_cache={root / 'p' / 'patches.tsv'}"
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--override", cache, "--seed", "7"]) == 0
    assert "seed = 7" in (out / "config.txt").read_text()
    ckpt = out / "checkpoint.txt"
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--override", cache, "--seed", "7",
                 "--checkpoint", str(ckpt)]) == 0
    summary = json.loads((out / "eval_summary.json").read_text())
    assert summary["episodes"] == 3 and 0 <= summary["mean"] <= 1 and summary["ci95"] >= 0
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--override", cache, "--seed", "7",
                 "--checkpoint", str(ckpt), "--episodes", "1"]) == 0
    assert json.loads((out / "eval_summary.json").read_text())["ci95"] == 0
    metrics = (out / "train_metrics.csv").read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(out), "--override", cache, "--seed", "7",
                 "--override", "episodes=3", "--resume"]) == 1  # different config hash
    assert main(["train", "--config", str(cfg), "--out", str(out), "--override", cache, "--seed", "7", "--resume"]) == 0
    assert (out / "train_metrics.csv").read_bytes() == metrics


def test_eval_rejects_missing_corrupt_and_mismatched_checkpoints(workspace, tmp_path):
    root, cfg = workspace
    cache = f"patch_cache={root / 'p' / 'patches.tsv'}"
    args = ["eval", "--config", str(cfg), "--out", str(tmp_path), "--override", cache]
    assert main(args + ["--checkpoint", str(tmp_path / "none.txt")]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("abnet-checkpoint 1\narray x 1 0.5\nend 0000\n")
    assert main(args + ["--checkpoint", str(bad)]) == 3
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--override", cache]) == 0
    assert main(args + ["--override", "backbone_channels=5", "--checkpoint", str(out / "checkpoint.txt")]) == 1


def test_ablation_suite_writes_four_runs(workspace, tmp_path):
    root, cfg = workspace
    cache = f"patch_cache={root / 'p' / 'patches.tsv'}"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--override", cache,
                 "--override", "episodes=1", "--ablation-suite"]) == 0
    for name in ("baseline", "la", "la_sp", "la_sp_lr"):
        assert (tmp_path / name / "checkpoint.txt").is_file()
        assert (tmp_path / name / "train_metrics.csv").read_text().count("\n") == 2


def test_gradcheck_passes_and_names_injected_faults(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    groups = [line.split()[1] for line in out.splitlines() if line.startswith("group")]
    assert len(groups) == len(set(groups)) == 6
    assert main(["gradcheck", "--inject-fault", "dense"]) == 1
    last = capsys.readouterr().out.splitlines()[-1]
    assert last.startswith("gradcheck FAILED") and "dense" in last
