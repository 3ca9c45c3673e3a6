import csv
import json

import pytest

from mqmk.harness import (
    DEFAULT_CONFIG,
    ConfigError,
    axis_values,
    cmd_ablate,
    cmd_cost,
    cmd_pretrain,
    cmd_report,
    dumps,
    parse_config,
    run_continual,
)
from mqmk.harness.cli import main
from mqmk.matching import Paradigm

TINY_INI = """
[backbone]
image_size = 8
patch_size = 4
embed_dim = 8
num_layers = 2
num_heads = 2

[prompts]
g_layers = 0
e_layers = 0, 1
g_length = 2
e_length = 3

[train]
paradigm = MQMK
epochs_per_task = 2
batch_size = 8
learning_rate = 0.01

[data]
num_classes = 4
num_tasks = 2
train_per_class = 8
test_per_class = 4

[pretext]
num_classes = 4
train_per_class = 8
test_per_class = 4
epochs = 1

[run]
checkpoint = ck/backbone.pclb
output_dir = out
seeds = 0, 1
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "exp.ini").write_text(TINY_INI)
    return tmp_path


@pytest.fixture
def cfg(workdir):
    c = parse_config(TINY_INI, workdir)
    cmd_pretrain(c)
    return c


def test_default_config_parses():
    c = parse_config(DEFAULT_CONFIG)
    assert c.backbone.embed_dim == 32 and c.num_tasks == 5
    assert c.train.paradigm is Paradigm.MQMK and c.train.key_granularity is None
    assert c.seeds == (0, 1, 2, 3, 4)
    assert c.plan.e_layers == (0, 1, 2, 3)


def test_validation_lists_every_problem():
    bad = TINY_INI.replace("num_heads = 2", "num_heads = 3").replace("K = 1", "") \
        .replace("paradigm = MQMK", "paradigm = MQXX\nbogus = 1").replace("seeds = 0, 1", "seeds =")
    with pytest.raises(ConfigError) as err:
        parse_config(bad)
    text = "\n".join(err.value.problems)
    assert len(err.value.problems) >= 4, text
    for needle in ("num_heads", "bogus", "MQXX", "seeds"):
        assert needle in text


def test_invalid_values_reported():
    with pytest.raises(ConfigError, match="not a valid int"):
        parse_config(TINY_INI.replace("embed_dim = 8", "embed_dim = eight"))
    with pytest.raises(ConfigError, match="divisible"):
        parse_config(TINY_INI.replace("num_tasks = 2", "num_tasks = 3"))
    with pytest.raises(ConfigError, match="K=3"):
        parse_config(TINY_INI.replace("paradigm = MQMK", "paradigm = MQMK\nK = 3"))
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(TINY_INI + "\n[extra]\nx = 1\n")
    with pytest.raises(ConfigError, match="syntax"):
        parse_config("no header line")


def test_pretext_overlap_rejected():
    with pytest.raises(ConfigError, match="overlap"):
        parse_config(TINY_INI.replace("epochs = 1", "epochs = 1\nclass_offset = 2"))


def test_missing_dataset_path(workdir):
    with pytest.raises(ConfigError, match="missing"):
        parse_config(TINY_INI.replace("num_classes = 4\nnum_tasks", "path = nowhere\nnum_classes = 4\nnum_tasks"),
                     workdir)


def test_pretrain_deterministic(cfg):
    first = cfg.checkpoint.read_bytes()
    cmd_pretrain(cfg)
    assert cfg.checkpoint.read_bytes() == first


def test_run_deterministic_and_schema(cfg, tmp_path):
    a = run_continual(cfg, 0)
    b = run_continual(cfg, 0)
    assert dumps(a.summary) == dumps(b.summary)
    assert a.artifacts == b.artifacts
    a.write(tmp_path / "a")
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["pass_counters"]["training"]["forwards_per_batch"] == 1
    assert s["pass_counters"]["inference"]["forwards_per_sample"] == 2
    assert s["parameter_counts"]["key_params"] == 4 * 8
    assert abs(s["oracle"]["recombined_accuracy"] - s["oracle"]["natural_accuracy"]) <= 1e-12


def test_single_task_run(workdir):
    c = parse_config(TINY_INI.replace("num_tasks = 2", "num_tasks = 1"), workdir)
    cmd_pretrain(c)
    s = run_continual(c, 0).summary
    assert s["final"]["A"] == s["accuracy_matrix"][0][0]
    assert s["final"]["F"] == 0.0


def test_cli_run_and_report(cfg, workdir, capsys):
    assert main(["run", "-c", str(workdir / "exp.ini")]) == 0
    out = workdir / "out"
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["seeds"] == [0, 1]
    with open(out / "runs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    (out / "seed_0" / "accuracy_matrix.csv").unlink()
    cmd_report(out)
    after = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert after == before


def test_cli_exit_codes(workdir, capsys):
    assert main(["run", "-c", str(workdir / "nope.ini")]) == 1
    assert main(["run", "-c", str(workdir / "exp.ini")]) == 1  # no checkpoint yet
    assert "pretrain" in capsys.readouterr().err
    (workdir / "bad.ini").write_text(TINY_INI.replace("num_heads = 2", "num_heads = 3"))
    assert main(["pretrain", "-c", str(workdir / "bad.ini")]) == 1
    assert main(["report", str(workdir)]) == 1
    with pytest.raises(SystemExit):
        main(["ablate", "-c", str(workdir / "exp.ini"), "--axis", "colour"])


def test_cli_corrupt_checkpoint_is_invalid_input(cfg, workdir, capsys):
    cfg.checkpoint.write_bytes(b"PCLB" + b"\x00" * 8)
    assert main(["run", "-c", str(workdir / "exp.ini")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_runtime_failure(cfg, workdir, capsys, monkeypatch):
    import mqmk.harness.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "cmd_run", boom)
    assert main(["run", "-c", str(workdir / "exp.ini")]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_axis_values(cfg):
    assert axis_values(cfg, "paradigm") == list(Paradigm)
    assert axis_values(cfg, "K") == [1, 2]
    assert axis_values(cfg, "key_granularity") == [1, 2]
    assert axis_values(cfg, "prompt_depth") == [1, 2]
    with pytest.raises(ConfigError, match="no values"):
        axis_values(cfg, "K", [])
    with pytest.raises(ConfigError, match="K=5"):
        axis_values(cfg, "K", ["5"])
    with pytest.raises(ConfigError, match="unknown axis"):
        axis_values(cfg, "colour")


def test_ablate_paradigm_rows(cfg):
    from dataclasses import replace
    rows = cmd_ablate(replace(cfg, seeds=(0,)), "paradigm")
    assert [r["value"] for r in rows] == ["SQSK", "SQMK", "MQSK", "MQMK"]
    table = (cfg.output_dir / "ablate_paradigm" / "table.csv").read_text().splitlines()
    assert len(table) == 5 and table[0].startswith("axis,value,paradigm,runs,A_T_mean")


def test_cost_report(cfg):
    report = cmd_cost(cfg)
    assert all(r["consistent"] for r in report["passes"])
    assert report["parameter_counts"]["reference"]["MK_minus_SK_keys"] == 69_120
    ratios = {r["paradigm"]: r["reference_inference_ratio_vs_sqsk"] for r in report["passes"]}
    assert ratios["MQMK"] == 5.0 and ratios["SQSK"] == 1.0


def test_run_from_dataset_directory(cfg, workdir):
    from mqmk.data import SynthSpec, generate, split_stream, write_stream
    ds = generate(SynthSpec(num_classes=4, train_per_class=8, test_per_class=4, image_size=8))
    write_stream(workdir / "bench", split_stream(ds.train, ds.test, 2, seed=0))
    from_files = parse_config(TINY_INI.replace("num_tasks = 2", "num_tasks = 2\npath = bench"), workdir)
    assert from_files.dataset_path == workdir / "bench"
    a = run_continual(from_files, 0).summary
    b = run_continual(cfg, 0).summary
    assert a["final"] == b["final"]
