import csv

import numpy as np
import pytest

from mnartri import config as config_mod
from mnartri.cli import main
from mnartri.errors import InvalidInputError

FAST = ["epochs=30", "n_iterations=3", "n_steps=2", "epsilon=0.5", "batch_size=64"]


def run(tmp_path, command, *settings, name="out"):
    out = tmp_path / name
    args = [command, "--set", f"output_dir={out}"]
    for s in settings:
        args += ["--set", s]
    return main(args), out


def header(path):
    return path.read_text().splitlines()[0]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def movielens_file(tmp_path):
    rng = np.random.default_rng(0)
    lines = []
    for u in range(1, 121):
        for i in range(1, 31):
            if rng.random() < 0.9 / i ** 0.5:
                lines.append(f"{u}\t{i}\t{rng.integers(1, 6)}\t0")
    path = tmp_path / "u.data"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def coat_files(tmp_path):
    rng = np.random.default_rng(1)
    train = np.where(rng.random((12, 15)) < 0.3, rng.integers(1, 6, (12, 15)), 0)
    test = np.where(rng.random((12, 15)) < 0.3, rng.integers(1, 6, (12, 15)), 0)
    for name, mat in (("train.ascii", train), ("test.ascii", test)):
        (tmp_path / name).write_text("\n".join(" ".join(map(str, r)) for r in mat) + "\n")
    return tmp_path / "train.ascii", tmp_path / "test.ascii"


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nmethod = mf_naive\nl2 = 0.01\n\nn_seeds=3  # trailing\n")
        cfg = config_mod.build(str(path), ["l2=0.5", "propensity_smoothing=true"])
        assert (cfg.method, cfg.l2, cfg.n_seeds, cfg.propensity_smoothing) == ("mf_naive", 0.5, 3, True)

    def test_text_round_trip(self, tmp_path):
        cfg = config_mod.build(None, ["l2=0.003", "dim=7"])
        (tmp_path / "c.cfg").write_text(cfg.to_text())
        assert config_mod.build(str(tmp_path / "c.cfg")) == cfg

    @pytest.mark.parametrize("pair", ["nokey=1", "l2=abc", "l2=5", "epsilon=2", "dim=0", "method=svd",
                                      "propensity=popularity", "n_seeds=0", "sweep_budget=0"])
    def test_rejected(self, pair):
        with pytest.raises(InvalidInputError):
            config_mod.build(None, [pair])


class TestExitCodes:
    def test_unknown_propensity(self, tmp_path):
        assert run(tmp_path, "run", "propensity=bogus")[0] == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 1

    def test_bad_data_path_named(self, tmp_path, capsys):
        code, _ = run(tmp_path, "ingest", "dataset=coat", f"coat_train={tmp_path}/missing.ascii",
                      f"coat_test={tmp_path}/missing.ascii")
        assert code == 2
        assert "missing.ascii" in capsys.readouterr().err

    def test_unset_dataset_prints_instructions(self, tmp_path, capsys):
        code, _ = run(tmp_path, "ingest", "dataset=yahoo")
        assert code == 2 and "webscope" in capsys.readouterr().err

    def test_verify_requires_synthetic(self, tmp_path):
        assert run(tmp_path, "verify", "dataset=coat")[0] == 1

    def test_divergence_reported(self, tmp_path):
        code, out = run(tmp_path, "run", "n_seeds=2", "learning_rate=1e9", "l2=1e-6", "epochs=20",
                        "synthetic_m=20", "synthetic_n=20", "batch_size=2")
        assert code == 3
        assert "failed seed" in (out / "report.txt").read_text()


class TestRun:
    def test_outputs_and_golden_headers(self, tmp_path):
        code, out = run(tmp_path, "run", "n_seeds=2", "method=mf_ips_at", *FAST)
        assert code == 0
        assert header(out / "metrics.csv") == "dataset,propensity,method,seed,mae,mse,ndcg@3"
        assert header(out / "aggregate.csv") == "dataset,propensity,method,metric,mean,stderr,n_seeds,n_failed"
        assert header(out / "traces.csv") == "seed,iteration,term_a,term_b,pseudo_size,test_mse"
        assert header(out / "traces_seed0.csv") == "iteration,term_a,term_b,pseudo_size,test_mse"
        assert header(out / "table.csv").startswith("dataset,propensity,mae_without_at,mae_with_at")
        assert len(rows(out / "metrics.csv")) == 2
        assert len(rows(out / "traces.csv")) == 6
        assert (out / "config.resolved.txt").exists()

    def test_uniform_ips_reproduces_naive(self, tmp_path):
        _, a = run(tmp_path, "run", "n_seeds=2", "method=mf_naive", *FAST, name="naive")
        _, b = run(tmp_path, "run", "n_seeds=2", "method=mf_ips", "propensity=uniform", *FAST, name="ips")
        for ra, rb in zip(rows(a / "metrics.csv"), rows(b / "metrics.csv")):
            assert (ra["mae"], ra["mse"], ra["ndcg@3"]) == (rb["mae"], rb["mse"], rb["ndcg@3"])

    @pytest.mark.parametrize("method", ["mf_naive", "mf_ips", "mf_ips_at"])
    def test_deterministic(self, tmp_path, method):
        _, a = run(tmp_path, "run", "n_seeds=2", f"method={method}", "propensity=user", *FAST, name="a")
        _, b = run(tmp_path, "run", "n_seeds=2", f"method={method}", "propensity=user", *FAST, name="b")
        for f in ("metrics.csv", "aggregate.csv"):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_coat_like_files(self, tmp_path, coat_files):
        tr, te = coat_files
        code, out = run(tmp_path, "run", "dataset=coat", f"coat_train={tr}", f"coat_test={te}",
                        "n_seeds=2", "propensity=nb_true", "propensity_smoothing=true", *FAST)
        assert code == 0 and len(rows(out / "metrics.csv")) == 2


class TestIngest:
    def test_report(self, tmp_path, coat_files):
        tr, te = coat_files
        code, out = run(tmp_path, "ingest", "dataset=coat", f"coat_train={tr}", f"coat_test={te}")
        text = (out / "report.txt").read_text()
        assert code == 0 and "m=12 n=15" in text
        assert "KL(test||train)=" in text and "KL(train||test)=" in text
        for name in ("train", "validation", "test"):
            assert header(out / f"{name}.txt").split()[:2] == ["12", "15"]

    def test_deterministic(self, tmp_path, movielens_file):
        _, a = run(tmp_path, "ingest", "dataset=movielens", f"movielens_path={movielens_file}", name="a")
        _, b = run(tmp_path, "ingest", "dataset=movielens", f"movielens_path={movielens_file}", name="b")
        for f in ("train.txt", "validation.txt", "test.txt", "report.txt"):
            assert (a / f).read_bytes() == (b / f).read_bytes()


class TestSweep:
    def test_budget_one(self, tmp_path):
        code, out = run(tmp_path, "sweep", "sweep_budget=1", "method=mf_ips", *FAST)
        assert code == 0
        trials = rows(out / "trials.csv")
        assert len(trials) == 1
        assert header(out / "trials.csv") == "trial,l2,dim,epsilon,val_metric"
        best = config_mod.build(str(out / "best.cfg"))
        assert best.l2 == float(trials[0]["l2"]) and best.dim == int(trials[0]["dim"])

    def test_rows_equal_budget_and_deterministic(self, tmp_path):
        _, a = run(tmp_path, "sweep", "sweep_budget=4", "method=mf_ips_at", *FAST, name="a")
        _, b = run(tmp_path, "sweep", "sweep_budget=4", "method=mf_ips_at", *FAST, name="b")
        assert len(rows(a / "trials.csv")) == 4
        assert (a / "trials.csv").read_bytes() == (b / "trials.csv").read_bytes()
        assert (a / "best.cfg").read_bytes() == (b / "best.cfg").read_bytes()

    def test_candidate_ranges(self):
        from mnartri.experiment import sweep_candidates
        cands = sweep_candidates(200, seed=0)
        assert all(1e-6 <= c["l2"] <= 1 and 1e-3 <= c["epsilon"] <= 1 for c in cands)
        assert {c["dim"] for c in cands} == set(range(5, 51, 5))
        assert sweep_candidates(5, seed=0) == cands[:5]

    def test_ips_selection_metric(self, tmp_path):
        code, out = run(tmp_path, "sweep", "sweep_budget=2", "sweep_metric=ips", "propensity=item",
                        "synthetic_m=30", "synthetic_n=30", "synthetic_p_min=0.2", *FAST)
        assert code == 0 and "ips MSE" in (out / "best.cfg").read_text()


class TestVerify:
    def test_default_passes(self, tmp_path, capsys):
        code, out = run(tmp_path, "verify")
        assert code == 0
        row = rows(out / "verify.csv")[0]
        assert float(row["ips_fraction"]) >= 0.99 and float(row["pseudo_fraction"]) >= 0.99
        assert float(row["ips_exact_max_bias"]) == 0.0

    def test_loose_delta(self, tmp_path):
        _, out = run(tmp_path, "verify", "delta_conf=0.5", "n_trials=30")
        row = rows(out / "verify.csv")[0]
        assert float(row["ips_fraction"]) >= 0.5 and float(row["pseudo_fraction"]) >= 0.5

    def test_deterministic(self, tmp_path):
        _, a = run(tmp_path, "verify", "n_trials=10", name="a")
        _, b = run(tmp_path, "verify", "n_trials=10", name="b")
        assert (a / "verify.csv").read_bytes() == (b / "verify.csv").read_bytes()


class TestRq1:
    def test_table_shape(self, tmp_path, movielens_file):
        code, out = run(tmp_path, "rq1", "dataset=movielens", f"movielens_path={movielens_file}",
                        "rq1_min_items=1,2,5,10,20,50", "n_seeds=2", *FAST)
        table = rows(out / "rq1.csv")
        assert code == 0
        assert header(out / "rq1.csv") == ("min_items,min_propensity,method,mse_mean,mse_stderr,"
                                           "relative_mse,relative_stderr,n_items,n_failed")
        assert len(table) == 12
        assert {r["method"] for r in table} == {"mf_ips", "mf_ips_at"}
        ref = [r for r in table if r["min_items"] == "50"]
        assert all(float(r["relative_mse"]) == 1.0 for r in ref)
        pmins = [float(r["min_propensity"]) for r in table[::2]]
        assert pmins == sorted(pmins)

    def test_requires_movielens(self, tmp_path):
        assert run(tmp_path, "rq1")[0] == 1

    def test_deterministic(self, tmp_path, movielens_file):
        args = ("dataset=movielens", f"movielens_path={movielens_file}", "rq1_min_items=1,5", "n_seeds=2", *FAST)
        _, a = run(tmp_path, "rq1", *args, name="a")
        _, b = run(tmp_path, "rq1", *args, name="b")
        assert (a / "rq1.csv").read_bytes() == (b / "rq1.csv").read_bytes()


def _bundle_with_validation_only_users():
    from mnartri.core import RatingDataset
    from mnartri.datasets import DatasetBundle

    rng = np.random.default_rng(2)
    m, n = 12, 10
    u, i = np.nonzero(rng.random((m, n)) < 0.5)
    r = rng.integers(1, 6, len(u))
    val_mask = u < 3
    ds = lambda mask: RatingDataset(m, n, u[mask], i[mask], r[mask])
    full = RatingDataset(m, n, u, i, r)
    return DatasetBundle(ds(~val_mask), ds(val_mask), full, {"source": "coat"})


class TestExperiment:
    cfg = config_mod.build(None, ["dataset=coat", "propensity=user", "n_seeds=3", *FAST])

    def test_propensity_fit_after_resplit(self):
        from mnartri import experiment

        bundle = _bundle_with_validation_only_users()
        results = experiment.run_seeds(self.cfg, bundle)
        assert all(r.error is None for r in results)

    def test_compare_and_trace_descent(self):
        from mnartri import experiment

        bundle = _bundle_with_validation_only_users()
        results = experiment.compare_at(self.cfg, bundle, ("uniform", "user"), seeds=[0, 1])
        assert set(results) == {(k, m) for k in ("uniform", "user") for m in ("mf_ips", "mf_ips_at")}
        summary = experiment.metric_summary(results[("user", "mf_ips")], "mae")
        assert summary["mean"] > 0 and summary["stderr"] >= 0
        descent = experiment.trace_descent(results[("user", "mf_ips_at")])
        assert descent.n_runs == 2
        assert isinstance(descent.bound_terms_decrease, bool)

    def test_trace_descent_needs_traces(self):
        from mnartri import experiment
        from mnartri.errors import EmptyDataError

        with pytest.raises(EmptyDataError):
            experiment.trace_descent([experiment.SeedResult(0)])
