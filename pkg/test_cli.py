"""
Test the omni_engine command line end to end
"""
import json

import numpy as np
import pytest

from cli.main import main
from render.executor import blank_image
from trajectory.model import parse_trajectory
from utils.loader import load_image, save_image


def _records(out):
    return [json.loads(line) for line in out.splitlines() if line.strip()]


def _trajectory(tail="42", indices=(3, 3, 3, 3), ground_truth=None):
    record = {
        "prompt_text": "How many red cells?",
        "segments": [
            {"type": "text", "content": "look at the grid ."},
            {"type": "image_tokens", "indices": list(indices), "grid_h": 2, "grid_w": 2},
            {"type": "text", "content": f"Final Answer: {tail}"},
        ],
    }
    if ground_truth is not None:
        record["ground_truth"] = ground_truth
    return json.dumps(record)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def codebook(tmp_path, capsys):
    path = str(tmp_path / "cb.bin")
    assert main(["codebook-gen", "--k", "8", "--d", "4", "--seed", "1", "--out", path]) == 0
    capsys.readouterr()
    return path


def test_codebook_gen(tmp_path, capsys):
    path = tmp_path / "cb.bin"
    assert main(["codebook-gen", "--k", "4", "--d", "2", "--seed", "0", "--out", str(path)]) == 0
    (record,) = _records(capsys.readouterr().out)
    assert (record["k"], record["d"], record["seed"]) == (4, 2, 0)
    assert path.is_file()


def test_score(tmp_path, capsys, codebook):
    path = _write(tmp_path / "t.jsonl", [_trajectory(), "", _trajectory(indices=(0, 1, 2, 3))])
    assert main(["score", "--codebook", codebook, "--tau", "1.0", "--trajectories", path]) == 0
    first, second = _records(capsys.readouterr().out)
    assert first["line"] == 1 and second["line"] == 3
    assert first["r_pe"] == 1.0 and first["per_segment"] == [1.0]
    assert 0.0 < second["r_pe"] < 1.0


def test_score_reports_bad_lines(tmp_path, capsys, codebook):
    bad_grid = json.dumps({"prompt_text": "Q", "segments": [
        {"type": "text", "content": "x"},
        {"type": "image_tokens", "indices": [1, 2, 3], "grid_h": 2, "grid_w": 2},
    ]})
    path = _write(tmp_path / "t.jsonl", [_trajectory(), "{not json", bad_grid])
    assert main(["score", "--codebook", codebook, "--trajectories", path]) == 1
    captured = capsys.readouterr()
    records = _records(captured.out)
    assert [r["line"] for r in records] == [1, 2, 3]
    assert records[1]["error"] == "MalformedJson"
    assert records[2]["error"] == "GridMismatch"
    assert "failed at lines 2, 3" in captured.err


def test_verify(tmp_path, capsys):
    path = _write(tmp_path / "t.jsonl", [
        _trajectory("42", ground_truth="42"),
        _trajectory("41", ground_truth="42"),
    ])
    assert main(["--workers", "2", "verify", "--trajectories", path]) == 0
    right, wrong = _records(capsys.readouterr().out)
    assert right["r_acc"] == 1.0 and right["matched_rule"] == "Numeric"
    assert wrong["r_acc"] == 0.0


def test_verify_reports_undecodable_lines(tmp_path, capsys):
    path = tmp_path / "t.jsonl"
    good = _trajectory("42", ground_truth="42").encode("utf-8")
    path.write_bytes(good + b"\n" + b"\xff\xfe\n" + good + b"\n")
    assert main(["verify", "--trajectories", str(path)]) == 1
    captured = capsys.readouterr()
    first, bad, last = _records(captured.out)
    assert first["r_acc"] == 1.0 and last["r_acc"] == 1.0
    assert bad["line"] == 2 and bad["error"] == "MalformedJson"
    assert "failed at lines 2" in captured.err


def test_verify_options_and_missing_gold(tmp_path, capsys):
    path = _write(tmp_path / "t.jsonl", [_trajectory("green")])
    assert main(["verify", "--gold", "B", "--options", "red, green, blue", "--trajectories", path]) == 0
    (record,) = _records(capsys.readouterr().out)
    assert record["matched_rule"] == "Domain" and record["r_acc"] == 1.0

    assert main(["verify", "--trajectories", path]) == 1
    (record,) = _records(capsys.readouterr().out)
    assert record["error"] == "MissingGroundTruth"


def test_advantage(tmp_path, capsys):
    path = _write(tmp_path / "g.jsonl", [
        json.dumps({"prompt_id": "a", "samples": [{"reward": r} for r in (1, 0, 0, 0)]}),
        json.dumps({"prompt_id": "b", "samples": [
            {"reward": 1.0, "logp_old": [-1.0, -2.0], "logp_ref": [-1.0, -2.0], "logp_cur": [-1.0, -2.0], "mask": [0, 1]},
            {"reward": 1.0, "logp_old": [-1.0], "logp_ref": [-1.0], "logp_cur": [-1.0], "mask": [1]},
        ]}),
    ])
    assert main(["advantage", "--in", path]) == 0
    a, b = _records(capsys.readouterr().out)
    np.testing.assert_allclose(a["advantages"], [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)
    assert a["objective"] is None and not a["degenerate"]
    assert b["degenerate"] and b["advantages"] == [0.0, 0.0]
    assert b["objective"] == 0.0


def test_advantage_rejects_non_finite_rewards(tmp_path, capsys):
    path = _write(tmp_path / "g.jsonl", [
        '{"prompt_id": "a", "samples": [{"reward": NaN}, {"reward": 0}]}',
        json.dumps({"prompt_id": "b", "samples": [{"reward": 1e308}, {"reward": -1e308}]}),
    ])
    assert main(["advantage", "--in", path]) == 1
    out = capsys.readouterr().out
    assert "NaN" not in out
    bad, extreme = _records(out)
    assert bad["line"] == 1 and "error" in bad
    assert not extreme["degenerate"]
    np.testing.assert_allclose(extreme["advantages"], [1.0, -1.0])


def test_advantage_bad_clip_range(tmp_path, capsys):
    path = _write(tmp_path / "g.jsonl", [json.dumps({"prompt_id": "a", "samples": [{"reward": 1}, {"reward": 0}]})])
    assert main(["advantage", "--in", path, "--eps-low", "1.5"]) == 1
    assert "error" in capsys.readouterr().err


def test_render(tmp_path, capsys):
    image = tmp_path / "in.png"
    save_image(blank_image(64, 64), str(image))
    actions = _write(tmp_path / "actions.txt", [
        "# outline the top-left quadrant",
        "BBOX(0.0,0.0,0.5,0.5)",
        "MARK(0.25,0.25,1)",
    ])
    out_dir = tmp_path / "frames"
    assert main(["render", "--image", str(image), "--actions", actions, "--out-dir", str(out_dir)]) == 0
    records = _records(capsys.readouterr().out)
    assert [r["step"] for r in records] == [1, 2]
    assert records[0]["action"] == "BBOX(0.0,0.0,0.5,0.5)"
    assert load_image(str(out_dir / "rat_2.png")).shape == (64, 64, 3)


def test_render_stops_at_failing_step(tmp_path, capsys):
    image = tmp_path / "in.png"
    save_image(blank_image(100, 100), str(image))
    actions = _write(tmp_path / "actions.txt", ["BBOX(0.1,0.1,0.2,0.2)", "ZOOM-in(0.0,0.0,0.001,0.5)"])
    out_dir = tmp_path / "frames"
    assert main(["render", "--image", str(image), "--actions", actions, "--out-dir", str(out_dir)]) == 1
    records = _records(capsys.readouterr().out)
    assert records[0]["error"] == "EmptyCrop" and records[0]["step"] == 2
    assert (out_dir / "rat_1.png").is_file()
    assert not (out_dir / "rat_2.png").exists()


def test_render_parse_error(tmp_path, capsys):
    image = tmp_path / "in.png"
    save_image(blank_image(16, 16), str(image))
    actions = _write(tmp_path / "actions.txt", ["BBOX(0.1,0.1,0.2,0.2)", "CIRCLE(0.5,0.5)"])
    assert main(["render", "--image", str(image), "--actions", actions, "--out-dir", str(tmp_path)]) == 1
    (record,) = _records(capsys.readouterr().out)
    assert record == {"line": 2, "error": "UnknownAction", "message": record["message"]}


def test_bootstrap(tmp_path, capsys):
    assert main(["bootstrap", "--seed", "7", "--n", "2", "--image-grid", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2
    for line in lines:
        t = parse_trajectory(line)
        assert t.num_steps >= 2 and t.ground_truth is not None
        assert "line" not in json.loads(line)


def test_bootstrap_from_cot(tmp_path, capsys):
    cot = _write(tmp_path / "cot.jsonl", [
        json.dumps({"steps": ["look at the grid .", "count the red cells .", "zoom on the grid ."]}),
        json.dumps({"steps": "not a list"}),
    ])
    assert main(["bootstrap", "--seed", "7", "--cot", cot]) == 1
    captured = capsys.readouterr()
    first, second = _records(captured.out)
    assert parse_trajectory(json.dumps(first)).num_steps == 3
    assert second["line"] == 2
    assert "failed at lines 2" in captured.err


def test_judge_prompt(capsys):
    assert main(["judge-prompt", "--gold", "B", "--answer", "green", "--options", "red,green,blue"]) == 0
    (record,) = _records(capsys.readouterr().out)
    assert set(record) == {"system", "user"}
    assert "B. green" in record["user"]

    assert main(["--format", "text", "judge-prompt", "--gold", "4", "--answer", "four"]) == 0
    assert "### Model Answer\nfour" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["score"],
    ["bootstrap", "--n", "2"],
    ["train-toy"],
    ["verify", "--trajectories", "x", "--bogus"],
    ["verify", "--traj", "x"],
    ["--work", "2", "judge-prompt", "--gold", "1", "--answer", "1"],
    ["frobnicate"],
    ["--format", "xml", "judge-prompt", "--gold", "1", "--answer", "1"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_input_file(tmp_path, capsys):
    assert main(["verify", "--gold", "1", "--trajectories", str(tmp_path / "missing.jsonl")]) == 1
    assert main(["score", "--codebook", str(tmp_path / "missing.bin"), "--trajectories", "-"]) == 1


def test_train_toy_is_deterministic(tmp_path, capsys):
    config = tmp_path / "toy.yaml"
    config.write_text(
        "n_tasks: 2\nimage_grid: 2\ncodebook_k: 8\ncodebook_d: 4\ngroup_size: 4\n"
        "eval_samples: 2\nmax_new_tokens: 32\n",
        encoding="utf-8",
    )
    outputs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        argv = ["train-toy", "--config", str(config), "--seed", "3", "--pesft-steps", "2",
                "--perpo-steps", "1", "--out-dir", str(out_dir)]
        assert main(argv) == 0
        (summary,) = _records(capsys.readouterr().out)
        assert summary["pesft_steps"] == 2 and summary["perpo_steps"] == 1
        assert "metrics" not in summary
        outputs.append((out_dir / "metrics.jsonl").read_bytes())
    assert outputs[0] == outputs[1]


def test_train_toy_gamma_override(tmp_path, capsys):
    out_dir = tmp_path / "run"
    argv = ["train-toy", "--seed", "1", "--pesft-steps", "0", "--perpo-steps", "0",
            "--gamma", "0", "--out-dir", str(out_dir)]
    assert main(argv) == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert report["config"]["reward"]["gamma"] == 0.0
    capsys.readouterr()

    assert main(["train-toy", "--seed", "1", "--gamma", "-1"]) == 1
