import json
import math

import numpy as np
import pytest

from cellmp.cli import main
from cellmp.datagen import GeometricGraph, save_graph


def hexagon_file(path):
    pos = np.array([[math.cos(a), math.sin(a)] for a in np.linspace(0, 2 * np.pi, 7)[:-1]])
    g = GeometricGraph(positions=pos, edges=[(i, (i + 1) % 6) for i in range(6)])
    save_graph(g, path)
    return path


def unit_square_file(path):
    g = GeometricGraph(
        positions=np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
        edges=[(0, 1), (1, 2), (2, 3), (0, 3)],
        two_cells=[[0, 1, 2, 3]],
    )
    save_graph(g, path)
    return path


def test_lift_hexagon(tmp_path, capsys):
    src = hexagon_file(tmp_path / "hex.json")
    code = main(["lift", "--set", f"paths.input={src}", "--out", str(tmp_path / "o")])
    assert code == 0
    doc = json.loads((tmp_path / "o" / "lifted.json").read_text())
    assert doc["two_cells"] == [[0, 1, 2, 3, 4, 5]]
    assert "1 rings" in capsys.readouterr().out


def test_lift_forest_empty(tmp_path):
    g = GeometricGraph(positions=np.zeros((4, 2)) + np.arange(4)[:, None], edges=[(0, 1), (1, 2), (2, 3)])
    save_graph(g, tmp_path / "path.json")
    code = main(["lift", "--set", f"paths.input={tmp_path / 'path.json'}", "--out", str(tmp_path / "o")])
    assert code == 0
    doc = json.loads((tmp_path / "o" / "lifted.json").read_text())
    assert doc["two_cells"] == []


def test_lift_missing_input_exit_2(tmp_path, capsys):
    code = main(["lift", "--set", f"paths.input={tmp_path / 'nope.json'}", "--out", str(tmp_path)])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_lift_deterministic_bytes(tmp_path):
    src = hexagon_file(tmp_path / "hex.json")
    main(["lift", "--set", f"paths.input={src}", "--out", str(tmp_path / "a")])
    main(["lift", "--set", f"paths.input={src}", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "lifted.json").read_bytes() == (tmp_path / "b" / "lifted.json").read_bytes()


def test_invariants_unit_square(tmp_path):
    src = unit_square_file(tmp_path / "sq.json")
    code = main(["invariants", "--set", f"paths.input={src}", "--out", str(tmp_path / "o")])
    assert code == 0
    lines = (tmp_path / "o" / "invariants.csv").read_text().splitlines()
    assert lines[0] == "kind,sender_rank,sender_index,receiver_rank,receiver_index,schema,values"
    point_rows = [l for l in lines if l.startswith("point,2,0,0,")]
    assert len(point_rows) == 4
    row = point_rows[0].split(",")
    assert row[5] == "node-to-ring-midpoint;ring-perimeter;hull-volume;hull-area"
    values = [float(x) for x in row[6].split(";")]
    assert np.allclose(values, [math.sqrt(2) / 2, 4.0, 1.0, 4.0])


def test_invariants_empty_two_cells_header_only(tmp_path):
    g = GeometricGraph(positions=np.array([[0.0, 0.0], [1.0, 0.0]]), edges=[])
    save_graph(g, tmp_path / "pts.json")
    code = main(["invariants", "--set", f"paths.input={tmp_path / 'pts.json'}", "--out", str(tmp_path / "o")])
    assert code == 0
    lines = (tmp_path / "o" / "invariants.csv").read_text().splitlines()
    assert len(lines) == 1  # header only: no relations at all


def test_invariants_schema_order_follows_config(tmp_path):
    src = unit_square_file(tmp_path / "sq.json")
    code = main(
        [
            "invariants",
            "--set", f"paths.input={src}",
            "--set", 'model.invariants={"2->0/point": ["hull-area", "ring-perimeter"]}',
            "--out", str(tmp_path / "o"),
        ]
    )
    assert code == 0
    lines = (tmp_path / "o" / "invariants.csv").read_text().splitlines()
    row = next(l for l in lines if l.startswith("point,2,0,0,")).split(",")
    assert row[5] == "hull-area;ring-perimeter"
    assert [float(x) for x in row[6].split(";")] == [4.0, 4.0]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """simulate -> train -> eval on a tiny config, shared across tests."""
    root = tmp_path_factory.mktemp("pipeline")
    assert (
        main(
            [
                "simulate",
                "--seed", "3",
                "--set", "data.n_train=6",
                "--set", "data.n_val=3",
                "--set", "data.n_test=3",
                "--set", "data.steps=50",
                "--out", str(root),
            ]
        )
        == 0
    )
    train_args = [
        "train",
        "--seed", "3",
        "--set", f"paths.dataset={root / 'dataset'}",
        "--set", "model.position_update=true",
        "--set", "model.velocity_input=true",
        "--set", "model.readout=positions",
        "--set", "model.num_layers=1",
        "--set", "model.hidden_width=4",
        "--set", "train.epochs=2",
        "--set", "train.batch_size=6",
    ]
    assert main(train_args + ["--out", str(root / "t1")]) == 0
    return root


def test_train_outputs(tiny_run):
    root = tiny_run
    metrics = json.loads((root / "t1" / "metrics.json").read_text())
    assert "mse" in metrics and metrics["version"]
    curve = (root / "t1" / "curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,train_loss,val_metric"
    assert len(curve) == 3
    ckpt = json.loads((root / "t1" / "checkpoint.json").read_text())
    assert ckpt["format_version"] == 1
    assert "model_config" in ckpt and ckpt["model_config"]["num_layers"] == 1


def test_eval_deterministic(tiny_run):
    root = tiny_run
    args = [
        "eval",
        "--set", f"paths.checkpoint={root / 't1' / 'checkpoint.json'}",
        "--set", f"paths.dataset={root / 'dataset'}",
    ]
    assert main(args + ["--out", str(root / "e1")]) == 0
    assert main(args + ["--out", str(root / "e2")]) == 0
    m1 = json.loads((root / "e1" / "eval.json").read_text())
    m2 = json.loads((root / "e2" / "eval.json").read_text())
    assert m1["mse"] == m2["mse"]


def test_zero_lr_train_keeps_initial_metric(tiny_run, tmp_path):
    root = tiny_run
    args = [
        "train",
        "--seed", "3",
        "--set", f"paths.dataset={root / 'dataset'}",
        "--set", "model.position_update=true",
        "--set", "model.velocity_input=true",
        "--set", "model.readout=positions",
        "--set", "model.num_layers=1",
        "--set", "model.hidden_width=4",
        "--set", "train.epochs=3",
        "--set", "train.batch_size=6",
        "--set", "train.lr=0.0",
        "--set", "train.weight_decay=0.0",
        "--out", str(tmp_path / "zero"),
    ]
    assert main(args) == 0
    curve = (tmp_path / "zero" / "curve.csv").read_text().splitlines()[1:]
    losses = {row.split(",")[1] for row in curve}
    assert len(losses) == 1


def test_check_command_passes(tmp_path):
    args = [
        "check",
        "--set", "check.complexes=2",
        "--set", "check.transforms=3",
        "--set", "check.count_graphs=5",
        "--set", "check.grad_hidden_width=3",
        "--out", str(tmp_path / "c"),
    ]
    assert main(args) == 0
    report = json.loads((tmp_path / "c" / "check_report.json").read_text())
    assert len(report["reports"]) == 5
    assert all(r["passed"] for r in report["reports"])
    assert report["config"]["check"]["complexes"] == 2


def test_check_negative_control_fails(tmp_path):
    args = [
        "check",
        "--set", "check.complexes=2",
        "--set", "check.transforms=4",
        "--set", "check.count_graphs=5",
        "--set", "check.grad_hidden_width=3",
        "--set", "check.leak_coordinates=true",
        "--out", str(tmp_path / "c"),
    ]
    assert main(args) == 1
    report = json.loads((tmp_path / "c" / "check_report.json").read_text())
    scalar = next(r for r in report["reports"] if r["name"] == "scalar-invariance")
    assert not scalar["passed"] and scalar["max_error"] > 1e-2


def test_bad_set_syntax_exit_2(tmp_path, capsys):
    assert main(["check", "--set", "oops", "--out", str(tmp_path)]) == 2
    assert "dotted.key=value" in capsys.readouterr().err
