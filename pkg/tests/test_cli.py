import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from attrda.cli import main
from attrda.config import experiment_spec, generator_spec, load_experiment, parse_config, train_config
from attrda.data import load_dataset
from attrda.errors import ConfigError, SchemaError
from attrda.experiment import results_csv, run_experiment, summary_csv
from attrda.model import checkpoint_meta, load_checkpoint
from attrda.schema import load_schema

ROOT = Path(__file__).resolve().parents[1]

GEN = """
[generator]
attributes = make:2, body:3
dims = 6
source_counts = 4
target_counts = 3
test_source_counts = 5
test_target_counts = 5
seed = 1
"""

TRAIN = """
[model]
hidden = 8
feature_dim = 8
domain_hidden = 8

[train]
learning_rate = 0.01
batch_size = 8
steps = 25
setting = semisup
"""

EXPERIMENT = """
[experiment]
setting = semisup
modes = dc-att-acl, source-plus-target
seeds = 3
{extra}
""" + GEN + TRAIN.replace("setting = semisup\n", "")


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture
def data_dir(tmp_path):
    assert main(["generate", "--config", write(tmp_path, "gen.ini", GEN), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


# -- config parsing ----------------------------------------------------------

def test_generator_spec_counts_and_schema():
    spec = generator_spec(parse_config(GEN.replace("source_counts = 4", "source_counts = 2..9")))
    assert spec.schema.n_classes == 6 and spec.dims == 6
    a, b = spec.config(0), spec.config(1)
    assert min(a.source_counts) >= 2 and max(a.source_counts) <= 9
    assert a.source_counts != b.source_counts and a.source_counts == spec.config(0).source_counts
    assert spec.config(0, "test").target_counts == (5,) * 6
    listed = generator_spec(parse_config(GEN.replace("target_counts = 3", "target_counts = 1,2,3,4,5,6")))
    assert listed.config().target_counts == (1, 2, 3, 4, 5, 6)


def test_generator_defaults():
    spec = generator_spec(parse_config(""))
    assert spec.schema.n_classes == 48 and spec.dims == 64


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        generator_spec(parse_config("[generator]\ndimz = 3\n"))
    with pytest.raises(ConfigError, match="integer"):
        generator_spec(parse_config("[generator]\ndims = three\n"))
    with pytest.raises(ConfigError):
        parse_config("no section header\n")
    with pytest.raises(SchemaError):
        generator_spec(parse_config("[generator]\nattributes = a:1\n"))
    with pytest.raises(ConfigError):
        train_config(parse_config("[train]\nmode = fancy\n"))
    with pytest.raises(ConfigError, match="not found"):
        load_experiment(tmp_path / "missing.ini")


def test_schema_file_option(tmp_path, data_dir):
    cp = parse_config("[generator]\nschema_file = data/schema.txt\ndims = 4\n")
    assert generator_spec(cp, tmp_path).schema == load_schema(data_dir / "schema.txt")


def test_train_config_overrides():
    cp = parse_config(TRAIN + "\n[weights]\nconsistency = 0.5, 2\ntemperature = 3\n")
    tc = train_config(cp, mode="dc", seed=9)
    assert (tc.mode, tc.seed, tc.steps, tc.learning_rate) == ("dc", 9, 25, 0.01)
    assert tc.weights.consistency == (0.5, 2.0) and tc.weights.temperature == 3.0


def test_experiment_spec_mode_sections():
    spec = experiment_spec(parse_config(EXPERIMENT.format(extra="") + "\n[mode dc-att-acl]\nsteps = 5\n"))
    assert spec.modes == ("dc-att-acl", "source-plus-target") and spec.seeds == (3,)
    assert spec.train_for("dc-att-acl", 3).steps == 5 and spec.train_for("source-plus-target", 3).steps == 25
    assert spec.train_for("dc-att-acl", 3).setting == "semisup"
    with pytest.raises(ConfigError):
        experiment_spec(parse_config(EXPERIMENT.format(extra="") + "\n[mode nope]\nsteps = 5\n"))
    with pytest.raises(ConfigError):
        experiment_spec(parse_config(EXPERIMENT.format(extra="gain = dc, dc-att-acl")))
    with pytest.raises(ConfigError):
        experiment_spec(parse_config(EXPERIMENT.format(extra="").replace("seeds = 3", "seeds =")))
    # the rendered effective spec parses back to the same spec
    again = experiment_spec(parse_config(spec.render()))
    assert again.render() == spec.render()


def test_shipped_configs_parse():
    for name in ("unsup", "semisup", "smoke"):
        spec = load_experiment(ROOT / "configs" / f"{name}.ini")
        assert spec.gain == ("dc", "dc-att-acl")
    assert train_config(parse_config((ROOT / "configs" / "train.ini").read_text())).learning_rate == 0.0015


# -- generate ----------------------------------------------------------------

def test_generate_writes_loadable_files(data_dir, capsys):
    schema = load_schema(data_dir / "schema.txt")
    train = load_dataset(data_dir / "train.txt", schema)
    test = load_dataset(data_dir / "test.txt", schema, "test")
    assert len(train) == 6 * 4 + 6 * 3 and len(test) == 60
    assert "[generator]" in (data_dir / "generator.ini").read_text()


def test_generate_invalid_schema(tmp_path, capsys):
    code = main(["generate", "--config", write(tmp_path, "g.ini", "[generator]\nattributes = a:1, b:2\n"),
                 "--out", str(tmp_path / "o")])
    assert code == 3
    assert "error:" in capsys.readouterr().err


def test_generate_seed_flag_changes_data(tmp_path):
    cfg = write(tmp_path, "g.ini", GEN)
    main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"])
    main(["generate", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "train.txt").read_text() != (tmp_path / "b" / "train.txt").read_text()


# -- train / eval ------------------------------------------------------------

def test_train_deterministic(tmp_path, data_dir):
    cfg = write(tmp_path, "t.ini", TRAIN)
    for d in ("r1", "r2"):
        assert main(["train", str(data_dir / "train.txt"), "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for name in ("metrics.jsonl", "checkpoint.txt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    rec = json.loads((tmp_path / "r1" / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["step"] == 0 and len(rec["L_a"]) == 2


def test_train_missing_dataset(tmp_path, capsys):
    (tmp_path / "schema.txt").write_text("classes 2\nattribute a 2\nclass 0 category 0\nclass 1 category 1\n")
    assert main(["train", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")]) == 3
    assert main(["train", str(tmp_path / "x" / "nope.txt"), "--out", str(tmp_path / "o")]) == 2


def test_train_mode_flag_echoes_zeroed_weights(tmp_path, data_dir, capsys):
    main(["train", str(data_dir / "train.txt"), "--config", write(tmp_path, "t.ini", TRAIN), "--out",
          str(tmp_path / "o"), "--mode", "source-only"])
    out = capsys.readouterr().out
    effective = out.split("[effective weights]")[1].split("# end configuration")[0]
    for key in ("attribute_softmax", "consistency", "confusion", "class_soft", "attribute_soft"):
        assert f"{key} = 0.0" in effective
    assert "class_softmax = 1.0" in effective
    assert "mode = source-only" in out
    assert checkpoint_meta(tmp_path / "o" / "checkpoint.txt")["mode"] == "source-only"


def test_train_bad_config_exit_code(tmp_path, data_dir):
    cfg = write(tmp_path, "t.ini", "[train]\nbatch_size = 3\n")
    assert main(["train", str(data_dir / "train.txt"), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_train_divergence_exit_code(tmp_path, data_dir):
    text = (data_dir / "train.txt").read_text().splitlines()
    rows = [" ".join(line.split()[:4] + ["1e308"] * 6) for line in text[1:]]
    (data_dir / "huge.txt").write_text("\n".join([text[0], *rows]) + "\n")
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["train", str(data_dir / "huge.txt"), "--config", write(tmp_path, "t.ini", TRAIN),
                     "--out", str(tmp_path / "o")])
    assert code == 4


def test_eval_held_out(tmp_path, data_dir, capsys):
    main(["train", str(data_dir / "train.txt"), "--config", write(tmp_path, "t.ini", TRAIN), "--out",
          str(tmp_path / "m")])
    held = checkpoint_meta(tmp_path / "m" / "checkpoint.txt")["heldout_classes"]
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "m" / "checkpoint.txt"), str(data_dir / "test.txt"), "--held-out-only",
                 "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["classes"] == [int(c) for c in held.split(",")]
    assert sum(map(sum, report["confusion"])) == 5 * len(report["classes"])
    assert (tmp_path / "ev" / "per_class.csv").read_text().startswith("class_id,n_examples,accuracy,delta")
    assert main(["eval", str(tmp_path / "m" / "checkpoint.txt"), str(data_dir / "test.txt")]) == 0
    full = json.loads(capsys.readouterr().out.split("# end configuration\n")[-1])
    assert len(full["classes"]) == 6 and 0 <= full["accuracy"] <= 1


def test_eval_missing_checkpoint(tmp_path, data_dir):
    assert main(["eval", str(tmp_path / "none.txt"), str(data_dir / "test.txt")]) == 2


def test_eval_held_out_needs_held_out_classes(tmp_path, data_dir):
    # the full setting holds nothing out
    cfg = write(tmp_path, "t.ini", TRAIN.replace("semisup", "full"))
    main(["train", str(data_dir / "train.txt"), "--config", cfg, "--out", str(tmp_path / "m")])
    assert main(["eval", str(tmp_path / "m" / "checkpoint.txt"), str(data_dir / "test.txt"),
                 "--held-out-only"]) == 2
    ck = load_checkpoint(tmp_path / "m" / "checkpoint.txt")
    assert ck.config.n_classes == 6


# -- experiment --------------------------------------------------------------

def test_experiment_two_modes_one_seed(tmp_path, capsys):
    spec = write(tmp_path, "e.ini", EXPERIMENT.format(extra=""))
    assert main(["experiment", "--config", spec, "--out", str(tmp_path / "x")]) == 0
    summary = (tmp_path / "x" / "summary.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in summary[1:]] == ["dc-att-acl", "source-plus-target"]
    table = (tmp_path / "x" / "table.txt").read_text().splitlines()
    assert len([l for l in table if l.startswith(("dc-att-acl", "source-plus-target"))]) == 2
    assert table.index(next(l for l in table if l.startswith("dc-att-acl"))) < \
        table.index(next(l for l in table if l.startswith("source-plus-target")))
    assert "Adapt" in table[1] and "Consist" in table[1]
    assert not (tmp_path / "x" / "gain.csv").exists()


def test_experiment_outputs_byte_identical(tmp_path):
    spec = write(tmp_path, "e.ini", EXPERIMENT.format(extra="gain = source-plus-target, dc-att-acl"))
    for d in ("a", "b"):
        main(["experiment", "--config", spec, "--out", str(tmp_path / d)])
    for name in ("results.csv", "summary.csv", "gain.csv", "correlation.csv", "table.txt", "spec.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_experiment_workers_do_not_change_results(tmp_path):
    text = EXPERIMENT.format(extra="").replace("seeds = 3", "seeds = 3, 4")
    one = run_experiment(experiment_spec(parse_config(text)))
    spec = experiment_spec(parse_config(text.replace("[experiment]", "[experiment]\nworkers = 2")))
    par = run_experiment(spec)
    assert results_csv(one) == results_csv(par)
    assert summary_csv(one) == summary_csv(par)


def test_experiment_needs_spec(capsys):
    assert main(["experiment"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "attrda", "generate", "--config", str(tmp_path / "none.ini"),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 2 and "not found" in proc.stderr
