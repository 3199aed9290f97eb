import logging

import numpy as np
import pytest

from tsp_transformer import bench
from tsp_transformer.baselines import held_karp
from tsp_transformer.cli import main
from tsp_transformer.config import ConfigError, format_config, parse_config
from tsp_transformer.training import TrainConfig, read_metrics
from tsp_transformer.tsp import generate, read_instances, read_tours, write_instances

CONFIG = """# tiny run
n = 6
batch_size = 8
steps_per_epoch = 2
epochs = 1
lr = 1e-3
d = 8
h = 2
L_enc = 1
L_dec = 1
d_ff = 16
C = 10
baseline_eval_size = 16
seed = 3
optimizer = adam
grad_clip = 1.0
dtype = float64
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(CONFIG)
    code = main(["train", "--config", str(root / "cfg.txt"), "--out", str(root / "m.ckpt"),
                 "--metrics", str(root / "m.csv")])
    assert code == 0
    write_instances(generate(7, 6, 21), root / "set.txt")
    return root


class TestConfig:
    def test_full_file(self):
        cfg = parse_config(CONFIG)
        assert (cfg.n, cfg.learning_rate, cfg.heads, cfg.enc_layers, cfg.dtype) == (6, 1e-3, 2, 1, "float64")

    def test_round_trip(self):
        cfg = parse_config(CONFIG)
        assert parse_config(format_config(cfg)) == cfg

    def test_missing_lr_uses_default_with_warning(self, caplog):
        text = "\n".join(l for l in CONFIG.splitlines() if not l.startswith("lr"))
        with caplog.at_level(logging.WARNING):
            cfg = parse_config(text)
        assert cfg.learning_rate == TrainConfig().learning_rate
        assert any("'lr'" in r.message for r in caplog.records)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key 'colour'"):
            parse_config(CONFIG + "colour = blue\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="more than once"):
            parse_config(CONFIG + "n = 7\n")

    def test_d_not_divisible_by_h(self):
        with pytest.raises(ConfigError, match="divisible"):
            parse_config(CONFIG.replace("d = 8", "d = 10").replace("h = 2", "h = 4"))

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(CONFIG.replace("n = 6", "n = six"))


class TestGenerate:
    def test_writes_file(self, tmp_path):
        out = tmp_path / "g.txt"
        assert main(["generate", "--n", "10", "--count", "1000", "--seed", "1", "--out", str(out)]) == 0
        insts = read_instances(out)
        assert len(insts) == 1000 and insts[0].n == 10

    def test_same_seed_identical_files(self, tmp_path):
        for name in ("a", "b"):
            main(["generate", "--n", "5", "--count", "3", "--seed", "4", "--out", str(tmp_path / name)])
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_zero_count_is_usage_error(self, tmp_path):
        assert main(["generate", "--n", "5", "--count", "0", "--out", str(tmp_path / "x")]) == 1

    def test_unwritable_path(self, tmp_path):
        assert main(["generate", "--n", "5", "--count", "1", "--out", str(tmp_path / "no" / "dir" / "x")]) == 2

    def test_missing_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--n", "5"])
        assert exc.value.code == 1


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "m.ckpt").read_bytes()[:8] == b"TSPTCKPT"
        assert len(read_metrics(trained / "m.csv")) == 1

    def test_epochs_zero(self, tmp_path):
        (tmp_path / "c.txt").write_text(CONFIG.replace("epochs = 1", "epochs = 0"))
        code = main(["train", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "z.ckpt"),
                     "--metrics", str(tmp_path / "z.csv")])
        assert code == 0
        assert (tmp_path / "z.ckpt").exists()
        assert read_metrics(tmp_path / "z.csv") == []

    def test_bad_config_is_data_error(self, tmp_path):
        (tmp_path / "c.txt").write_text(CONFIG + "bogus = 1\n")
        assert main(["train", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "z.ckpt")]) == 2

    def test_resume_extends_epochs(self, trained, tmp_path):
        (tmp_path / "c.txt").write_text(CONFIG.replace("epochs = 1", "epochs = 2"))
        code = main(["train", "--config", str(tmp_path / "c.txt"), "--resume", str(trained / "m.ckpt"),
                     "--out", str(tmp_path / "r.ckpt"), "--metrics", str(tmp_path / "r.csv")])
        assert code == 0
        assert [m.epoch for m in read_metrics(tmp_path / "r.csv")] == [2]

    def test_resume_with_other_architecture_refused(self, trained, tmp_path):
        (tmp_path / "c.txt").write_text(CONFIG.replace("d_ff = 16", "d_ff = 32"))
        code = main(["train", "--config", str(tmp_path / "c.txt"), "--resume", str(trained / "m.ckpt"),
                     "--out", str(tmp_path / "r.ckpt")])
        assert code == 2


class TestSolve:
    def test_greedy(self, trained, tmp_path, capsys):
        out = tmp_path / "t.txt"
        code = main(["solve", "--ckpt", str(trained / "m.ckpt"), "--instances", str(trained / "set.txt"),
                     "--strategy", "greedy", "--out", str(out)])
        assert code == 0
        tours = read_tours(out)
        insts = read_instances(trained / "set.txt")
        for tour, inst in zip(tours, insts):
            assert sorted(tour.order) == list(range(7))
            assert tour.length >= held_karp(inst).length - 1e-9
        assert "mean_len=" in capsys.readouterr().out

    def test_beam_one_file_equals_greedy_file(self, trained, tmp_path):
        args = ["solve", "--ckpt", str(trained / "m.ckpt"), "--instances", str(trained / "set.txt")]
        main(args + ["--strategy", "greedy", "--out", str(tmp_path / "g.txt")])
        main(args + ["--strategy", "beam", "--beam-width", "1", "--out", str(tmp_path / "b.txt")])
        assert (tmp_path / "g.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_wide_beam_not_worse_on_average(self, trained, tmp_path):
        args = ["solve", "--ckpt", str(trained / "m.ckpt"), "--instances", str(trained / "set.txt")]
        main(args + ["--strategy", "greedy", "--out", str(tmp_path / "g.txt")])
        main(args + ["--strategy", "beam", "--beam-width", "50", "--out", str(tmp_path / "b.txt")])
        greedy = np.mean([t.length for t in read_tours(tmp_path / "g.txt")])
        beam = np.mean([t.length for t in read_tours(tmp_path / "b.txt")])
        assert beam <= greedy + 1e-9

    def test_sample_and_threads(self, trained, tmp_path):
        args = ["solve", "--ckpt", str(trained / "m.ckpt"), "--instances", str(trained / "set.txt"),
                "--strategy", "sample", "--seed", "5"]
        main(args + ["--out", str(tmp_path / "a.txt")])
        main(args + ["--out", str(tmp_path / "b.txt"), "--threads", "3"])
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_beam_needs_width(self, trained, tmp_path):
        code = main(["solve", "--ckpt", str(trained / "m.ckpt"), "--instances", str(trained / "set.txt"),
                     "--strategy", "beam", "--out", str(tmp_path / "x.txt")])
        assert code == 1

    def test_corrupt_checkpoint(self, trained, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"TSPTCKPT" + b"\x07\0\0\0")
        code = main(["solve", "--ckpt", str(bad), "--instances", str(trained / "set.txt"), "--out",
                     str(tmp_path / "x.txt")])
        assert code == 2

    def test_malformed_instances(self, trained, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("TSPSET v1 1 4\n0 0\n")
        code = main(["solve", "--ckpt", str(trained / "m.ckpt"), "--instances", str(bad), "--out",
                     str(tmp_path / "x.txt")])
        assert code == 2


class TestBench:
    def test_rows_and_round_trip(self, trained, tmp_path):
        out = tmp_path / "b.csv"
        timing = tmp_path / "t.csv"
        code = main(["bench", "--ckpt", str(trained / "m.ckpt"), "--instances", str(trained / "set.txt"),
                     "--methods", "held_karp,nearest_insertion,farthest_insertion,two_opt,greedy,beam:3",
                     "--out", str(out), "--timing-out", str(timing), "--timing-ns", "5,10",
                     "--timing-repeats", "2"])
        assert code == 0
        rows = bench.read_bench(out)
        assert [r.method for r in rows] == ["held_karp", "nearest_insertion", "farthest_insertion", "two_opt",
                                            "greedy", "beam:3"]
        assert rows[0].gap_pct == 0.0
        assert all(r.gap_pct >= -1e-6 for r in rows)
        assert rows[-1].beam_width == 3
        lines = timing.read_text().splitlines()
        assert lines[0] == "n,inference_seconds" and len(lines) == 3

    def test_large_n_leaves_gap_empty(self, tmp_path):
        write_instances(generate(20, 2, 0), tmp_path / "big.txt")
        code = main(["bench", "--instances", str(tmp_path / "big.txt"), "--methods", "nearest_insertion",
                     "--out", str(tmp_path / "b.csv")])
        assert code == 0
        row = bench.read_bench(tmp_path / "b.csv")[0]
        assert row.gap_pct is None
        assert (tmp_path / "b.csv").read_text().splitlines()[1].split(",")[3] == ""

    def test_learned_method_without_checkpoint(self, trained, tmp_path):
        code = main(["bench", "--instances", str(trained / "set.txt"), "--methods", "greedy",
                     "--out", str(tmp_path / "b.csv")])
        assert code == 1

    def test_unknown_method(self, trained, tmp_path):
        code = main(["bench", "--instances", str(trained / "set.txt"), "--methods", "simplex",
                     "--out", str(tmp_path / "b.csv")])
        assert code == 1


def test_thread_env_override(monkeypatch):
    monkeypatch.delenv("TSPT_THREADS", raising=False)
    assert bench.thread_count(4) == 4
    monkeypatch.setenv("TSPT_THREADS", "2")
    assert bench.thread_count(4) == 2


def test_parse_method():
    assert bench.parse_method("beam:50") == ("beam", 50)
    assert bench.parse_method("greedy") == ("greedy", None)
    with pytest.raises(ValueError):
        bench.parse_method("beam")


def test_power_law_fit_recovers_exponent():
    series = [(n, 3e-4 * n ** 2.0) for n in (10, 20, 40, 80)]
    a, k = bench.fit_power_law(series)
    assert k == pytest.approx(2.0) and a == pytest.approx(3e-4)
