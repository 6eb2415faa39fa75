import json

import pytest

from boxreplay.buffer import empty_buffer, save_buffer
from boxreplay.cli import main
from boxreplay.config import load_config_file


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus one finished tiny training run."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-shapes", "--out-dir", str(root / "train"),
                 "--classes", "4", "--images-per-class", "4",
                 "--seed", "0"]) == 0
    assert main(["gen-shapes", "--out-dir", str(root / "test"),
                 "--classes", "4", "--images-per-class", "2",
                 "--seed", "1"]) == 0
    code = main([
        "train", "--run-dir", str(root / "run"),
        "--set", f"data.train_manifest={root / 'train' / 'manifest.jsonl'}",
        "--set", f"data.test_manifest={root / 'test' / 'manifest.jsonl'}",
        "--set", "protocol.plan=2-2", "--set", "train.iterations=4",
        "--set", "train.batch_size=2", "--set", "buffer.capacity=12",
        "--set", "loss.beta=0.5", "--seed", "3",
    ])
    assert code == 0
    return root


def test_version_lists_format_ids(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
    out = capsys.readouterr().out
    assert "boxreplay-checkpoint-v1" in out
    assert "boxreplay-buffer-v1" in out


def test_unknown_verb_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_gen_shapes_and_protocol_split(workspace, capsys):
    code = main(["protocol-split", "--data",
                 str(workspace / "train" / "manifest.jsonl"),
                 "--plan", "2-2",
                 "--out-dir", str(workspace / "splits")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["task1"]["classes"] == [1, 2]
    assert summary["task2"]["classes"] == [3, 4]
    assert (workspace / "splits" / "task1.jsonl").exists()
    assert (workspace / "splits" / "task2.jsonl").exists()


def test_train_writes_resolved_snapshot(workspace):
    snapshot = load_config_file(workspace / "run" / "config.cfg")
    assert snapshot["loss.beta"] == 0.5        # --set override captured
    assert snapshot["train.seed"] == 3         # --seed shortcut captured
    assert snapshot["train.iterations"] == 4
    assert (workspace / "run" / "records.jsonl").exists()
    assert (workspace / "run" / "checkpoints" / "task2.pt").exists()


def test_train_profile_resolution(tmp_path, capsys):
    # profile names resolve, then fail fast on the missing data key
    code = main(["train", "--config", "shapes-2task",
                 "--run-dir", str(tmp_path / "r")])
    assert code == 2
    assert "data.train_manifest" in capsys.readouterr().err


def test_config_type_error_names_key(tmp_path, capsys):
    code = main(["train", "--run-dir", str(tmp_path / "r"),
                 "--set", "train.iterations=lots"])
    assert code == 2
    err = capsys.readouterr().err
    assert "train.iterations" in err and "int" in err


def test_eval_reports_and_is_idempotent(workspace, capsys, tmp_path):
    args = ["eval", "--checkpoint", str(workspace / "run" / "checkpoints" / "task2.pt"),
            "--data", str(workspace / "test" / "manifest.jsonl"),
            "--set", "protocol.plan=2-2",
            "--out", str(tmp_path / "report.json")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    second = capsys.readouterr().out
    assert first == second
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["group_map"]) == {"all", "new", "old"}
    assert report["group_map"]["old"] is not None


def test_eval_matches_training_record(workspace, capsys):
    """The eval verb reproduces the mAP stored in the task record."""
    records = [json.loads(line) for line in
               (workspace / "run" / "records.jsonl").read_text().splitlines()]
    final = records[-1]
    assert main(["eval", "--checkpoint",
                 str(workspace / "run" / final["checkpoint"]),
                 "--data", str(workspace / "test" / "manifest.jsonl"),
                 "--set", "protocol.plan=2-2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["group_map"] == final["metrics"]["group_map"]


def test_buffer_inspect(workspace, capsys):
    assert main(["buffer-inspect", "--buffer",
                 str(workspace / "run" / "buffers" / "task2")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["total"] <= 12
    assert set(info) >= {"capacity", "total", "per_class", "min_side",
                         "max_side"}


def test_augment_preview_renders_files(workspace, capsys):
    out = workspace / "previews"
    assert main(["augment-preview", "--buffer",
                 str(workspace / "run" / "buffers" / "task1"),
                 "--out-dir", str(out), "--n", "3", "--kind", "mosaic"]) == 0
    capsys.readouterr()
    files = sorted(out.glob("mosaic_*.png"))
    assert len(files) == 3
    assert all(f.stat().st_size > 0 for f in files)


def test_augment_preview_empty_buffer(tmp_path, capsys):
    save_buffer(empty_buffer(10), tmp_path / "empty")
    code = main(["augment-preview", "--buffer", str(tmp_path / "empty"),
                 "--out-dir", str(tmp_path / "out")])
    assert code == 1
    assert "buffer empty" in capsys.readouterr().err


def test_missing_buffer_is_plain_error(tmp_path, capsys):
    code = main(["buffer-inspect", "--buffer", str(tmp_path / "nowhere")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")
