import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from msbo.bench.cli import main
from msbo.drivers import TRACE_COLUMNS
from msbo.bench.runner import AGGREGATE_COLUMNS
from msbo.synthetic import import_weights

DATA = Path(__file__).parent / "data"


@pytest.fixture()
def pool_config(tmp_path):
    for name in ("pool.csv", "random_pool.yaml"):
        shutil.copy(DATA / name, tmp_path / name)
    return tmp_path / "random_pool.yaml"


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_output_columns_are_pinned():
    golden = (DATA / "golden_random_seed0.csv").read_text().splitlines()[0]
    assert golden.split(",") == list(TRACE_COLUMNS)
    assert (DATA / "golden_aggregate_header.csv").read_text().strip().split(",") == list(AGGREGATE_COLUMNS)


def test_run_matches_golden_trace(pool_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(pool_config), "--out", str(out)]) == 0
    assert (out / "traces" / "random_seed0.csv").read_text() == (DATA / "golden_random_seed0.csv").read_text()
    header = (out / "aggregate.csv").read_text().splitlines()[0]
    assert header == (DATA / "golden_aggregate_header.csv").read_text().strip()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and manifest["stage_costs"] == [0.25, 0.75]
    assert "random\tseed=0" in capsys.readouterr().out


def test_rerun_is_byte_identical(pool_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["run", "--config", str(pool_config), "--out", str(out)]) == 0
    assert _tree(a) == _tree(b)
    assert len(_tree(a)) == 6


def test_run_overrides(pool_config, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(pool_config), "--out", str(out), "--seeds", "3", "--budget", "7",
                 "--driver", "bo"]) == 0
    names = sorted(p.name for p in (out / "traces").iterdir())
    assert names == ["bo_seed3.csv"]
    last = (out / "traces" / "bo_seed3.csv").read_text().splitlines()[-1].split(",")
    assert float(last[TRACE_COLUMNS.index("cumulative_cost")]) <= 7 + 0.75


def test_report_formats(pool_config, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", "--config", str(pool_config), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--in", str(out), "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["driver"] == "random" and rows[0]["n_seeds"] == 2
    assert main(["report", "--in", str(out), "--format", "csv"]) == 0
    text = capsys.readouterr().out.splitlines()
    assert text[0].startswith("driver,n_seeds") and text[1].startswith("random,2,")


def test_generate_exports_weights(tmp_path, capsys):
    path = tmp_path / "demo.bin"
    assert main(["generate", "--preset", "demo2d", "--seed", "0", "--export", str(path), "--restarts", "8"]) == 0
    info = json.loads(capsys.readouterr().out)
    cascade = import_weights(path)
    assert cascade.y_opt == info["y_opt"]
    assert cascade.evaluate(np.array([info["x_opt"]]))[0] == info["y_opt"]


def test_errors_exit_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: demo2d\nseeds: []\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "seeds" in capsys.readouterr().err
    assert main(["run", "--config", str(DATA / "random_pool.yaml"), "--out", str(tmp_path / "z"),
                 "--budget", "5"]) == 2
    assert "initial design" in capsys.readouterr().err
    assert main(["generate", "--preset", "nope", "--export", str(tmp_path / "w.bin")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "y")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--config", str(bad), "--out", "x", "--driver", "sgd"])
