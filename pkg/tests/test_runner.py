import json
import os
from pathlib import Path

import numpy as np
import pytest

from metaseg import runner
from metaseg.cli import main as cli_main
from metaseg.runner import ConfigError, parse_config_text, to_ini

TINY = """
[experiment]
name = tiny
output_dir = {out}
algos = imaml,maml,naive
setup = exclusive
seed = 3

[model]
input_size = 16
base_channels = 2
depth = 2

[episode]
n_ways = 2
k_shots = 2
num_tasks = 2

[inner]
steps = 2
learning_rate = 0.01

[outer]
learning_rate = 0.001
meta_batch = 2

[finetune]
steps = 2

[naive]
epochs = 1
batch_size = 8

[eval]
n_eval_tasks = 3

[pool.a]
role = train
count = 16
seed = 11

[pool.b]
role = train
count = 16
contrast = -0.8
seed = 12

[pool.c]
role = holdout
count = 16
contrast = 0.4
seed = 13
"""


def tiny_config(tmp_path, sub="out") -> Path:
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY.format(out=tmp_path / sub))
    return cfg


class TestConfigParsing:
    def test_roundtrip_through_canonical_text(self, tmp_path):
        cfg = runner.parse_config(tiny_config(tmp_path))
        again = parse_config_text(to_ini(cfg))
        assert again == cfg

    def test_defaults_match_module_defaults(self):
        cfg = parse_config_text(
            "[pool.a]\nrole = train\n\n[pool.h]\nrole = holdout\n")
        assert cfg.inner.steps == 10
        assert cfg.inner.lambda_prox == 100.0
        assert cfg.outer.learning_rate == 1e-5
        assert cfg.outer.weight_decay == 5e-4
        assert cfg.loss.use_logcosh is True
        assert cfg.episode.k_shots == 5
        assert cfg.cg.max_iters == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key 'bogus'"):
            parse_config_text("[inner]\nbogus = 1\n\n[pool.h]\nrole = holdout\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match=r"unknown section \[wat\]"):
            parse_config_text("[wat]\nx = 1\n")

    def test_bad_value_names_section_and_key(self):
        with pytest.raises(ConfigError, match=r"\[inner\] steps"):
            parse_config_text("[inner]\nsteps = often\n\n[pool.h]\nrole = holdout\n")

    def test_bad_algo(self):
        with pytest.raises(ConfigError, match="unknown algorithm"):
            parse_config_text("[experiment]\nalgos = sgd\n\n[pool.h]\nrole = holdout\n")

    def test_requires_holdout(self):
        with pytest.raises(ConfigError, match="holdout"):
            parse_config_text("[pool.a]\nrole = train\n")

    def test_cross_test_category_rules(self):
        text = ("[experiment]\nsetup = same-category-cross-test\n\n"
                "[pool.a]\nrole = train\ncategory = skin\n\n"
                "[pool.b]\nrole = train\ncategory = polyp\n\n"
                "[pool.h]\nrole = holdout\ncategory = other\n")
        with pytest.raises(ConfigError, match="one category"):
            parse_config_text(text)

    def test_missing_file_exit_code_and_message(self, tmp_path, capsys):
        missing = tmp_path / "nope.ini"
        rc = runner.run(missing)
        assert rc == 2
        # message names the path

    def test_pool_dir_requires_path(self):
        with pytest.raises(ConfigError, match="path"):
            parse_config_text("[pool.h]\nrole = holdout\ntype = dir\n")


class TestRun:
    def test_dry_run(self, tmp_path, capsys):
        rc = cli_main(["run", "--config", str(tiny_config(tmp_path)), "--dry-run"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "pool 'a'" in out
        assert not (tmp_path / "out").exists()

    def test_full_tiny_run_outputs(self, tmp_path):
        rc = cli_main(["run", "--config", str(tiny_config(tmp_path))])
        assert rc == 0
        out = tmp_path / "out"
        reports = (out / "reports.csv").read_text().splitlines()
        assert len(reports) == 1 + 3 * 3   # header + 3 eval tasks per algo
        for algo in ("imaml", "maml", "naive"):
            assert sum(f",{algo}," in r for r in reports[1:]) == 3
        assert (out / "config.ini").is_file()
        assert (out / "summary.json").is_file()
        assert (out / "loss_curves.csv").is_file()
        assert (out / "imaml_state.ck").is_file()
        assert (out / "maml_state.ck").is_file()
        assert (out / "naive_params.ck").is_file()
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"imaml/exclusive/2", "maml/exclusive/2",
                                "naive/exclusive/2"}

    def test_reproducibility_byte_identical(self, tmp_path):
        c1 = tmp_path / "r1.ini"
        c2 = tmp_path / "r2.ini"
        c1.write_text(TINY.format(out=tmp_path / "o1"))
        c2.write_text(TINY.format(out=tmp_path / "o2"))
        assert cli_main(["run", "--config", str(c1)]) == 0
        assert cli_main(["run", "--config", str(c2)]) == 0
        a = (tmp_path / "o1" / "reports.csv").read_bytes()
        b = (tmp_path / "o2" / "reports.csv").read_bytes()
        assert a == b
        assert (tmp_path / "o1" / "loss_curves.csv").read_bytes() == \
               (tmp_path / "o2" / "loss_curves.csv").read_bytes()

    def test_seed_override_changes_results(self, tmp_path):
        c = tiny_config(tmp_path)
        assert cli_main(["run", "--config", str(c)]) == 0
        base = (tmp_path / "out" / "reports.csv").read_text()
        os.environ["IMAML_OUT"] = str(tmp_path / "seeded")
        try:
            assert cli_main(["run", "--config", str(c), "--seed", "99"]) == 0
        finally:
            del os.environ["IMAML_OUT"]
        seeded = (tmp_path / "seeded" / "reports.csv").read_text()
        assert seeded != base

    def test_env_output_override(self, tmp_path):
        c = tiny_config(tmp_path)
        os.environ["IMAML_OUT"] = str(tmp_path / "env_out")
        try:
            assert cli_main(["run", "--config", str(c)]) == 0
        finally:
            del os.environ["IMAML_OUT"]
        assert (tmp_path / "env_out" / "reports.csv").is_file()
        assert not (tmp_path / "out").exists()

    def test_config_copy_reparses_identically(self, tmp_path):
        c = tiny_config(tmp_path)
        assert cli_main(["run", "--config", str(c)]) == 0
        original = runner.parse_config(c)
        copied = runner.parse_config(tmp_path / "out" / "config.ini")
        assert copied == original


class TestCompare:
    def test_single_dir_passthrough(self, tmp_path, capsys):
        assert cli_main(["run", "--config", str(tiny_config(tmp_path))]) == 0
        assert cli_main(["compare", str(tmp_path / "out")]) == 0
        table = capsys.readouterr().out
        assert "imaml" in table and "naive" in table and "mean_dsc" in table

    def test_two_dirs_union(self, tmp_path):
        c = tiny_config(tmp_path)
        assert cli_main(["run", "--config", str(c)]) == 0
        os.environ["IMAML_OUT"] = str(tmp_path / "out2")
        try:
            assert cli_main(["run", "--config", str(c), "--seed", "42"]) == 0
        finally:
            del os.environ["IMAML_OUT"]
        summary, table = runner.compare([tmp_path / "out", tmp_path / "out2"])
        assert summary["imaml/exclusive/2"]["n_tasks"] == 6

    def test_schema_mismatch(self, tmp_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "reports.csv").write_text("nope\n")
        with pytest.raises(ValueError, match="schema"):
            runner.compare([bad])

    def test_missing_dir(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            runner.compare([tmp_path / "absent"])


class TestThreaded:
    def test_threaded_run_matches_serial(self, tmp_path):
        c = tiny_config(tmp_path)
        assert cli_main(["run", "--config", str(c)]) == 0
        os.environ["IMAML_OUT"] = str(tmp_path / "thr")
        try:
            assert cli_main(["run", "--config", str(c), "--threads", "3"]) == 0
        finally:
            del os.environ["IMAML_OUT"]
        a = (tmp_path / "out" / "reports.csv").read_bytes()
        b = (tmp_path / "thr" / "reports.csv").read_bytes()
        assert a == b


def test_cli_verify_passes(capsys):
    assert cli_main(["verify"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_run_with_directory_pools(tmp_path):
    """gen-data output feeds back through the dir loader end to end."""
    c = tiny_config(tmp_path)
    assert cli_main(["gen-data", "--config", str(c), "--out", str(tmp_path / "d")]) == 0
    dir_cfg = tmp_path / "dirs.ini"
    dir_cfg.write_text(f"""
[experiment]
algos = naive
output_dir = {tmp_path / "dirout"}
seed = 3

[model]
input_size = 16
base_channels = 2
depth = 2

[episode]
n_ways = 2
k_shots = 2
num_tasks = 2

[naive]
epochs = 1
batch_size = 8

[eval]
n_eval_tasks = 2

[pool.a]
role = train
type = dir
path = {tmp_path / "d" / "a"}

[pool.c]
role = holdout
type = dir
path = {tmp_path / "d" / "c"}
""")
    assert cli_main(["run", "--config", str(dir_cfg)]) == 0
    assert (tmp_path / "dirout" / "reports.csv").is_file()


class TestGenData:
    def test_writes_pools_with_manifests(self, tmp_path):
        c = tiny_config(tmp_path)
        rc = cli_main(["gen-data", "--config", str(c), "--out", str(tmp_path / "data")])
        assert rc == 0
        for pool in ("a", "b", "c"):
            root = tmp_path / "data" / pool
            assert (root / "manifest.txt").is_file()
            assert len(list((root / "images").glob("*.png"))) == 16
            assert len(list((root / "masks").glob("*.png"))) == 16

    def test_generated_pools_loadable(self, tmp_path):
        from metaseg.tasks import load_pool
        c = tiny_config(tmp_path)
        assert cli_main(["gen-data", "--config", str(c), "--out",
                         str(tmp_path / "data")]) == 0
        pool = load_pool(tmp_path / "data" / "a", image_size=16)
        assert len(pool) == 16
