import csv

import pytest

from gridflow import asset_path, cli

IEEE4 = str(asset_path("ieee4.ckt"))

LOOPED = """
set sbase_kva=1000
bus id=s phases=abc basekv=2.4
bus id=m phases=abc basekv=2.4
bus id=t phases=abc basekv=2.4
source bus=s pu=1.0 angle_deg=0
line id=L1 from=s to=m r1=0.3 x1=0.7
line id=L2 from=m to=t r1=0.3 x1=0.7
line id=L3 from=t to=s r1=0.3 x1=0.7
load id=LD bus=t kw=100,100,100 kvar=30,30,30
"""

ISLANDED = """
set sbase_kva=1000
bus id=s phases=abc basekv=2.4
bus id=m phases=abc basekv=2.4
bus id=x phases=abc basekv=2.4
source bus=s pu=1.0 angle_deg=0
line id=L1 from=s to=m r1=0.3 x1=0.7
load id=LD bus=m kw=100,100,100 kvar=30,30,30
"""

OVERLOADED = """
set sbase_kva=1000
bus id=s phases=abc basekv=2.4
bus id=m phases=abc basekv=2.4
source bus=s pu=1.0 angle_deg=0
line id=L1 from=s to=m r1=0.3 x1=0.7
load id=LD bus=m kw=90000,90000,90000 kvar=30000,30000,30000
"""

TINY_CFG = "horizon=24\nnoise=0.05\nshape=synthetic\ntrain_fraction=0.75\n"


def write(path, text):
    path.write_text(text)
    return str(path)


class TestTopLevel:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2

    def test_seed_env_fallback(self, monkeypatch):
        monkeypatch.setenv("GRIDFLOW_SEED", "17")
        assert cli._default_seed() == 17
        monkeypatch.delenv("GRIDFLOW_SEED")
        assert cli._default_seed() == 42


class TestValidate:
    def test_bundled_circuit_is_clean(self, capsys):
        assert cli.main(["validate", "--circuit", IEEE4]) == 0
        assert "ok" in capsys.readouterr().out

    def test_violations_reported_with_exit_1(self, tmp_path, capsys):
        ckt = write(tmp_path / "bad.ckt", ISLANDED)
        assert cli.main(["validate", "--circuit", ckt]) == 1
        assert "violation" in capsys.readouterr().out

    def test_unparseable_circuit_exits_2(self, tmp_path, capsys):
        ckt = write(tmp_path / "junk.ckt", "line id=L1\n")
        assert cli.main(["validate", "--circuit", ckt]) == cli.EXIT_PARSE
        assert "error" in capsys.readouterr().err

    def test_missing_file_exits_2(self):
        assert cli.main(["validate", "--circuit", "/no/such.ckt"]) == \
            cli.EXIT_PARSE


class TestSolve:
    def test_both_solvers_report_discrepancy(self, tmp_path, capsys):
        out = tmp_path / "sol.csv"
        losses = tmp_path / "loss.csv"
        code = cli.main(["solve", "--circuit", IEEE4, "--solver", "both",
                         "--out", str(out), "--losses", str(losses)])
        assert code == 0
        text = capsys.readouterr().out
        assert "fbs: converged" in text and "ci: converged" in text
        assert "cross-solver discrepancy" in text
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["bus", "phase", "v_pu", "theta_v_deg",
                           "i_pu", "theta_i_deg"]
        assert list(csv.reader(open(losses)))[0] == \
            ["branch", "p_loss_pu", "q_loss_pu"]

    def test_meshed_network_exits_4_under_fbs(self, tmp_path):
        ckt = write(tmp_path / "loop.ckt", LOOPED)
        assert cli.main(["solve", "--circuit", ckt, "--solver", "fbs"]) == \
            cli.EXIT_NOT_RADIAL

    def test_meshed_network_solves_with_current_injection(self, tmp_path):
        ckt = write(tmp_path / "loop.ckt", LOOPED)
        assert cli.main(["solve", "--circuit", ckt, "--solver", "ci"]) == 0

    def test_infeasible_load_exits_3(self, tmp_path):
        ckt = write(tmp_path / "over.ckt", OVERLOADED)
        assert cli.main(["solve", "--circuit", ckt, "--solver", "ci",
                         "--max-iter", "40"]) == cli.EXIT_NOT_CONVERGED


class TestGen:
    def gen(self, tmp_path, name="d.ds", extra=()):
        cfg = write(tmp_path / "tiny.cfg", TINY_CFG)
        out = tmp_path / name
        code = cli.main(["gen", "--circuit", IEEE4, "--config", cfg,
                         "--seed", "7", "--jobs", "1", "--out", str(out),
                         *extra])
        return code, out

    def test_writes_dataset_and_report(self, tmp_path, capsys):
        cfg = write(tmp_path / "tiny.cfg", TINY_CFG)
        out, rep = tmp_path / "d.ds", tmp_path / "rep.csv"
        code = cli.main(["gen", "--circuit", IEEE4, "--config", cfg,
                         "--seed", "7", "--jobs", "1", "--out", str(out),
                         "--report", str(rep)])
        assert code == 0
        assert "generated 24 samples" in capsys.readouterr().out
        from gridflow.datafiles import read_dataset
        ds = read_dataset(out)
        assert ds.n == 24 and len(ds.train_idx) == 18

    def test_output_is_deterministic(self, tmp_path):
        _, a = self.gen(tmp_path, "a.ds")
        _, b = self.gen(tmp_path, "b.ds")
        assert a.read_bytes() == b.read_bytes()

    def test_parallel_jobs_match_serial(self, tmp_path):
        _, a = self.gen(tmp_path, "a.ds")
        cfg = write(tmp_path / "tiny.cfg", TINY_CFG)
        out = tmp_path / "p.ds"
        assert cli.main(["gen", "--circuit", IEEE4, "--config", cfg,
                         "--seed", "7", "--jobs", "2",
                         "--out", str(out)]) == 0
        assert a.read_bytes() == out.read_bytes()

    def test_bad_config_exits_2(self, tmp_path):
        cfg = write(tmp_path / "bad.cfg", "horizon=minus five\n")
        assert cli.main(["gen", "--circuit", IEEE4, "--config", cfg,
                         "--out", str(tmp_path / "d.ds")]) == cli.EXIT_PARSE

    def test_excess_unconverged_scenarios_exit_5(self, tmp_path, monkeypatch):
        real = cli.generate_dataset

        def leaky(*args, **kwargs):
            ds = real(*args, **kwargs)
            ds.dropped = ds.n  # pretend half the horizon failed to converge
            return ds

        monkeypatch.setattr(cli, "generate_dataset", leaky)
        code, out = self.gen(tmp_path)
        assert code == cli.EXIT_UNCONVERGED_SCENARIOS
        # outputs are still written so the partial run can be inspected
        assert out.exists()


@pytest.fixture(scope="module")
def tiny_ds_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    cfg = write(root / "tiny.cfg", TINY_CFG)
    out = root / "tiny.ds"
    assert cli.main(["gen", "--circuit", IEEE4, "--config", cfg,
                     "--seed", "7", "--jobs", "1", "--out", str(out)]) == 0
    return out


class TestTrainEvalPlot:
    def train(self, tiny_ds_file, tmp_path, arch="mlp", extra=()):
        model = tmp_path / f"{arch}.model.json"
        code = cli.main(["train", "--dataset", str(tiny_ds_file),
                         "--arch", arch, "--epochs", "2", "--seed", "3",
                         "--out", str(model), *extra])
        return code, model

    @pytest.mark.parametrize("arch", ["mlp", "cnn", "rbf"])
    def test_all_architectures_train_and_eval(self, arch, tiny_ds_file,
                                              tmp_path, capsys):
        extra = ("--centers", "8") if arch == "rbf" else ()
        code, model = self.train(tiny_ds_file, tmp_path, arch, extra)
        assert code == 0
        assert f"trained {arch}" in capsys.readouterr().out
        metrics = tmp_path / "metrics.csv"
        assert cli.main(["eval", "--model", str(model),
                         "--dataset", str(tiny_ds_file),
                         "--out", str(metrics)]) == 0
        out = capsys.readouterr().out
        assert "overall" in out and metrics.exists()

    def test_loss_csv_written(self, tiny_ds_file, tmp_path):
        code, _ = self.train(tiny_ds_file, tmp_path, "mlp",
                             ("--loss-csv", str(tmp_path / "loss.csv")))
        assert code == 0
        rows = list(csv.reader(open(tmp_path / "loss.csv")))
        assert rows[0] == ["epoch", "train_mse"] and len(rows) == 3

    def test_zero_epochs_exits_2(self, tiny_ds_file, tmp_path):
        code, _ = self.train(tiny_ds_file, tmp_path, "mlp")
        code = cli.main(["train", "--dataset", str(tiny_ds_file),
                         "--arch", "mlp", "--epochs", "0",
                         "--out", str(tmp_path / "m.json")])
        assert code == cli.EXIT_PARSE

    def test_divergent_training_exits_6(self, tiny_ds_file, tmp_path,
                                        monkeypatch, capsys):
        import gridflow.surrogate
        from gridflow.nn import NonFiniteGradient

        def blowup(*args, **kwargs):
            raise NonFiniteGradient("loss is not finite")

        monkeypatch.setattr(gridflow.surrogate, "train", blowup)
        code = cli.main(["train", "--dataset", str(tiny_ds_file),
                         "--arch", "mlp", "--epochs", "2",
                         "--out", str(tmp_path / "m.json")])
        assert code == cli.EXIT_NONFINITE
        assert "training diverged" in capsys.readouterr().err

    def test_eval_slot_mismatch_exits_2(self, tiny_ds_file, tmp_path,
                                        capsys):
        _, model = self.train(tiny_ds_file, tmp_path, "mlp")
        import json
        doc = json.loads(model.read_text())
        doc["y_slots"] = doc["y_slots"][:-1] + ["V|nowhere.a"]
        model.write_text(json.dumps(doc))
        assert cli.main(["eval", "--model", str(model),
                         "--dataset", str(tiny_ds_file)]) == cli.EXIT_PARSE

    def test_corrupt_model_exits_2(self, tiny_ds_file, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["eval", "--model", str(bad),
                         "--dataset", str(tiny_ds_file)]) == cli.EXIT_PARSE

    def test_plot_dataset_with_overlay(self, tiny_ds_file, tmp_path, capsys):
        _, model = self.train(tiny_ds_file, tmp_path, "mlp")
        out = tmp_path / "figs"
        code = cli.main(["plot", "--dataset", str(tiny_ds_file),
                         "--model", str(model), "--group", "V",
                         "--hours", "12", "--out", str(out)])
        assert code == 0
        assert (out / "profile_V.svg").exists()
        assert (out / "overlay_V.svg").exists()
        assert (out / "overlay_V.csv").exists()

    def test_plot_solution_csv(self, tmp_path):
        sol = tmp_path / "sol.csv"
        assert cli.main(["solve", "--circuit", IEEE4, "--solver", "ci",
                         "--out", str(sol)]) == 0
        out = tmp_path / "figs"
        assert cli.main(["plot", "--solution", str(sol),
                         "--out", str(out)]) == 0
        assert (out / "solution.svg").exists()

    def test_plot_without_inputs_exits_2(self, tmp_path):
        assert cli.main(["plot", "--out", str(tmp_path)]) == cli.EXIT_PARSE


class TestRepro:
    def test_failing_case_exits_7(self, monkeypatch, capsys):
        class Row:
            label, family = "demo", "mlp"
            mse_pct, mae_pct = 9.0, 9.0
            passed = False

        class Result:
            rows = [Row()]
            baseline = None
            passed = False

            def table(self):
                return "demo table"

        import gridflow.repro
        monkeypatch.setattr(gridflow.repro, "run_case",
                            lambda *a, **k: Result())
        assert cli.main(["repro", "--case", "4node"]) == cli.EXIT_CRITERIA
        captured = capsys.readouterr()
        assert "demo table" in captured.out
        assert "demo/mlp" in captured.err
