import json

import numpy as np
import pytest
import torch

from idcl.cli import RunManifest, main
from idcl.trainer import load_checkpoint

TINY_CFG = """
model.d = 8
model.k = 2
model.layers = 2
icl.tau = 0.5
icl.batch = 32
train.lr = 0.01
train.batch_size = 512
train.max_epochs = 2
train.patience = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = root / "runs"
    assert main(["prepare", "--dataset", "synthetic", "--seed", "0", "--out", str(out)]) == 0
    return root, cfg, out


def test_prepare_outputs_and_manifest(workspace):
    _, _, out = workspace
    data_dir = out / "synthetic" / "data"
    for name in ("interactions.tsv", "item_concepts.tsv", "split.tsv", "manifest.json"):
        assert (data_dir / name).exists()
    manifest = RunManifest.read(data_dir / "manifest.json")
    assert manifest.kind == "prepare"
    assert manifest.extra["num_users"] == 400
    assert set(manifest.outputs) == {
        "interactions.tsv", "item_concepts.tsv", "split.tsv", "manifest.json"
    }


def test_prepare_rerun_is_byte_identical(workspace, tmp_path):
    _, _, out = workspace
    other = tmp_path / "runs2"
    assert main(["prepare", "--dataset", "synthetic", "--seed", "0", "--out", str(other)]) == 0
    a = (out / "synthetic" / "data" / "split.tsv").read_bytes()
    b = (other / "synthetic" / "data" / "split.tsv").read_bytes()
    assert a == b


def test_prepare_refuses_param_change_without_force(workspace, capsys):
    _, _, out = workspace
    code = main(["prepare", "--dataset", "synthetic", "--seed", "5", "--out", str(out)])
    assert code == 1
    assert "different parameters" in capsys.readouterr().err


def test_prepare_missing_concept_file_is_actionable(tmp_path, capsys):
    inter = tmp_path / "i.tsv"
    inter.write_text("u\ti\t5\t0\n")
    code = main([
        "prepare", "--dataset", "custom", "--interactions", str(inter),
        "--concepts", str(tmp_path / "absent.tsv"), "--out", str(tmp_path / "runs"),
    ])
    assert code == 1
    assert "concept file not found" in capsys.readouterr().err


def test_manifest_round_trip(workspace, tmp_path):
    _, _, out = workspace
    src = out / "synthetic" / "data" / "manifest.json"
    manifest = RunManifest.read(src)
    copy_path = tmp_path / "copy.json"
    manifest.write(copy_path)
    assert RunManifest.read(copy_path) == manifest
    assert json.loads(src.read_text()) == json.loads(copy_path.read_text())


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg, out = workspace
    for variant in ("idcl", "lightgcn", "no-icl"):
        code = main([
            "train", "--dataset", "synthetic", "--config", str(cfg),
            "--variant", variant, "--seed", "0", "--out", str(out),
        ])
        assert code == 0
    return out


def test_train_outputs(trained):
    run_dir = trained / "synthetic" / "idcl" / "0"
    for name in ("checkpoint.pt", "train_log.csv", "metrics.txt", "metrics.kv",
                 "metrics_val.kv", "manifest.json"):
        assert (run_dir / name).exists()
    manifest = RunManifest.read(run_dir / "manifest.json")
    for name in manifest.outputs:
        assert (run_dir / name).exists()


def test_train_refuses_overwrite(trained, workspace, capsys):
    root, cfg, out = workspace
    code = main([
        "train", "--dataset", "synthetic", "--config", str(cfg),
        "--variant", "idcl", "--seed", "0", "--out", str(out),
    ])
    assert code == 1
    assert "identical config" in capsys.readouterr().err


def test_no_icl_variant_logs_zero_icl(trained):
    log = (trained / "synthetic" / "no-icl" / "0" / "train_log.csv").read_text().splitlines()
    for line in log[1:]:
        assert float(line.split(",")[2]) == 0.0


def test_lightgcn_checkpoint_has_no_disentangler(trained):
    model, _ = load_checkpoint(trained / "synthetic" / "lightgcn" / "0" / "checkpoint.pt")
    assert set(model.state_dict()) == {"emb.layer0"}


def test_evaluate_command(trained, capsys, tmp_path):
    run = trained / "synthetic" / "idcl" / "0"
    out_file = tmp_path / "metrics.txt"
    code = main(["evaluate", "--runs", str(run), "--ks", "5", "20", "--out", str(out_file)])
    assert code == 0
    text = capsys.readouterr().out
    assert "recall@5" in text and "recall@20" in text
    assert out_file.exists()


def test_analyze_command(trained, capsys):
    run = trained / "synthetic" / "idcl" / "0"
    code = main(["analyze", "--run", str(run), "--samples", "20", "--seed", "0",
                 "--export", "user", "behavior-slice:0"])
    assert code == 0
    analysis_dir = run / "analysis"
    names = [p.name for p in analysis_dir.iterdir()]
    for prefix in ("behavior_similarity", "behavior_block_means", "user_block_means",
                   "intent_proportions", "intent_top3_labels", "behavior_distribution",
                   "embeddings_user", "embeddings_behavior-slice_0"):
        assert any(name.startswith(prefix) for name in names), prefix
    manifest = RunManifest.read(run / "manifest.json")
    assert any(o.startswith("analysis/") for o in manifest.outputs)


def test_analyze_rejects_lightgcn(trained, capsys):
    run = trained / "synthetic" / "lightgcn" / "0"
    code = main(["analyze", "--run", str(run)])
    assert code == 1
    assert "no intent structure" in capsys.readouterr().err


def test_compare_command(trained, capsys):
    code = main(["compare", "--runs", str(trained / "synthetic"), "--ks", "20"])
    assert code == 0
    text = capsys.readouterr().out
    assert "idcl" in text and "lightgcn" in text and "no-icl" in text
    assert "recall@20" in text
    assert "ablation" in text


def test_compare_refuses_mixed_datasets(trained, workspace, tmp_path, capsys):
    root, cfg, out = workspace
    other_out = tmp_path / "runs_other"
    assert main(["prepare", "--dataset", "synthetic", "--seed", "3",
                 "--out", str(other_out)]) == 0
    assert main(["train", "--dataset", "synthetic", "--config", str(cfg),
                 "--variant", "idcl", "--seed", "0", "--out", str(other_out)]) == 0
    code = main(["compare", "--runs", str(trained / "synthetic" / "idcl" / "0"),
                 str(other_out / "synthetic" / "idcl" / "0")])
    assert code == 1
    assert "different datasets" in capsys.readouterr().err


def test_train_deterministic_across_runs(workspace, tmp_path):
    root, cfg, out = workspace
    metrics = []
    for attempt in range(2):
        dest = tmp_path / f"det{attempt}"
        assert main(["prepare", "--dataset", "synthetic", "--seed", "0",
                     "--out", str(dest)]) == 0
        assert main(["train", "--dataset", "synthetic", "--config", str(cfg),
                     "--variant", "idcl", "--seed", "1", "--out", str(dest),
                     "--deterministic"]) == 0
        metrics.append((dest / "synthetic" / "idcl" / "1" / "metrics.kv").read_text())
    assert metrics[0] == metrics[1]
