import json

import pandas as pd
import pytest

from ponet.errors import EXIT_OK, EXIT_SUITE_FAILURE, EXIT_USAGE, InputError
from ponet.main import main, read_stream_input
from ponet.models.api import CheckReport

SMALL_CHECK = {
    "equivalence_instances": 6,
    "op_count_lengths": [1, 7],
    "op_count_dims": [1, 8],
    "grad_seeds": 2,
    "causal_streams": 2,
    "stream_length": 12,
    "leakage_probes": 3,
}


def _write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _train_checkpoint(tmp_path):
    config = _write_json(
        tmp_path / "train.json",
        {
            "task": {"kind": "parity", "length": 8, "vocab": 16, "segments": 2, "size": 32},
            "train": {"batch": 4, "steps": 2, "eval_every": 1, "eval_size": 8},
            "d": 8,
            "layers": 1,
        },
    )
    out = tmp_path / "train.csv"
    code = main(["train", "--config", config, "--variant", "no_ss_ga", "--save-checkpoint", "--out", str(out)])
    assert code == EXIT_OK
    return out, tmp_path / "train.checkpoint.json"


def test_check_schema_prints_report_schema(capsys):
    assert main(["check", "--schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert set(schema["properties"]) == {"passed", "seed", "precision", "suites"}


def test_check_small_run_passes(tmp_path):
    config = _write_json(tmp_path / "check.json", SMALL_CHECK)
    out = tmp_path / "report.json"
    assert main(["check", "--config", config, "--seed", "3", "--out", str(out)]) == EXIT_OK
    report = CheckReport.model_validate_json(out.read_text())
    assert report.passed
    assert report.seed == 3
    assert [s.name for s in report.suites] == ["fused_vs_naive", "op_count", "gradient", "causal"]


def test_check_fault_injection_fails_equivalence(tmp_path):
    config = _write_json(tmp_path / "check.json", SMALL_CHECK)
    out = tmp_path / "report.json"
    code = main(
        ["check", "--config", config, "--suites", "fused_vs_naive", "op_count", "--fault-injection", "corrupt_projection", "--out", str(out)]
    )
    assert code == EXIT_SUITE_FAILURE
    report = CheckReport.model_validate_json(out.read_text())
    assert report.failing() == ["fused_vs_naive"]


def test_check_rejects_unknown_config_fields(tmp_path):
    config = _write_json(tmp_path / "check.json", {**SMALL_CHECK, "tolerance_typo": 1.0})
    assert main(["check", "--config", config]) == EXIT_USAGE


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["check", "--no-such-flag"])
    assert info.value.code == 2


def test_bench_writes_rows_per_mixer(tmp_path):
    out = tmp_path / "bench.csv"
    code = main(
        ["bench", "--lengths", "8", "16", "--d", "8", "--heads", "2", "--layers", "1", "--batch", "2",
         "--warmup-iters", "0", "--out", str(out)]
    )
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns[:2]) == ["mixer", "length"]
    for mixer in ("ponet_naive", "ponet_fused", "self_attention"):
        assert frame.loc[frame.mixer == mixer, "length"].tolist() == [8, 16]


def test_bench_defaults_to_results_dir(tmp_path):
    assert main(["bench", "--lengths", "4", "--d", "4", "--heads", "1", "--batch", "1", "--mixers", "ponet_fused"]) == EXIT_OK
    assert (tmp_path / "results" / "bench.csv").exists()


def test_stream_rows_mode(tmp_path):
    lines = [",".join(str(0.1 * (i + j)) for j in range(4)) for i in range(10)]
    lines.insert(5, "---")
    source = tmp_path / "rows.txt"
    source.write_text("\n".join(lines) + "\n")
    config = _write_json(tmp_path / "stream.json", {"input": str(source), "d": 4})
    out = tmp_path / "stream.csv"
    assert main(["stream", "--config", config, "--out", str(out)]) == EXIT_OK
    assert pd.read_csv(out, header=None).shape == (10, 4)


def test_stream_rejects_ragged_rows(tmp_path):
    source = tmp_path / "rows.txt"
    source.write_text("1,2,3,4\n1,2\n")
    config = _write_json(tmp_path / "stream.json", {"input": str(source), "d": 4})
    assert main(["stream", "--config", config, "--out", str(tmp_path / "s.csv")]) == EXIT_USAGE


def test_read_stream_input_marks_boundaries(tmp_path):
    source = tmp_path / "tokens.txt"
    source.write_text("3\n---\n5\n\n7\n")
    items, flags = read_stream_input(source, "tokens")
    assert items == [3, 5, 7]
    assert flags == [False, True, False]
    source.write_text("\n---\n")
    with pytest.raises(InputError):
        read_stream_input(source, "tokens")
    source.write_text("x\n")
    with pytest.raises(InputError):
        read_stream_input(source, "tokens")


def test_norms_writes_four_rows_per_layer(tmp_path):
    config = _write_json(tmp_path / "norms.json", {"length": 8, "vocab": 16, "segments": 2, "d": 8, "layers": 2})
    out = tmp_path / "norms.csv"
    assert main(["norms", "--config", config, "--runs", "2", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["layer", "branch", "norm"]
    assert len(frame) == 2 * 4
    assert frame.branch[:4].tolist() == ["GA", "SMP", "LMP", "mean"]


def test_train_then_stream_from_checkpoint(tmp_path):
    out, checkpoint = _train_checkpoint(tmp_path)
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["step", "loss", "eval_acc"]
    assert frame.step.tolist() == [0, 1]
    assert checkpoint.exists()

    source = tmp_path / "tokens.txt"
    source.write_text("3\n4\n---\n5\n")
    stream_cfg = _write_json(tmp_path / "stream.json", {"input": str(source), "mode": "tokens"})
    stream_out = tmp_path / "stream.csv"
    code = main(["stream", "--config", stream_cfg, "--checkpoint", str(checkpoint), "--out", str(stream_out)])
    assert code == EXIT_OK
    assert pd.read_csv(stream_out, header=None).shape == (3, 8)


def test_stream_rows_use_checkpoint_width(tmp_path):
    _, checkpoint = _train_checkpoint(tmp_path)
    source = tmp_path / "rows.txt"
    source.write_text("\n".join(",".join(["0.5"] * 8) for _ in range(4)) + "\n")
    stream_cfg = _write_json(tmp_path / "stream.json", {"input": str(source), "mode": "rows"})
    stream_out = tmp_path / "stream.csv"
    code = main(["stream", "--config", stream_cfg, "--checkpoint", str(checkpoint), "--out", str(stream_out)])
    assert code == EXIT_OK
    assert pd.read_csv(stream_out, header=None).shape == (4, 8)

    source.write_text("\n".join(",".join(["0.5"] * 16) for _ in range(4)) + "\n")
    code = main(["stream", "--config", stream_cfg, "--checkpoint", str(checkpoint), "--out", str(stream_out)])
    assert code == EXIT_USAGE
