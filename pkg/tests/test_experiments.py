import csv
import io
import statistics

import pytest

from ldpstream.experiments import (
    DETAIL_HEADER,
    EXPERIMENTS,
    SUMMARY_HEADER,
    ExperimentSpec,
    configs_for,
    default_out_path,
    detail_path_for,
    run_experiment,
    write_result,
)
from ldpstream.privacy import relative_error

SMALL = {
    "error_vs_samplesize": ExperimentSpec("error_vs_samplesize", {"n_devices": 300}, repetitions=4, master_seed=1),
    "error_vs_fraction": ExperimentSpec("error_vs_fraction", {"n_devices": 200}, repetitions=3, master_seed=2),
    "error_vs_frequency": ExperimentSpec(
        "error_vs_frequency", {"n_devices": 3000, "duration_seconds": 4}, master_seed=3,
    ),
    "endtoend_million": ExperimentSpec(
        "endtoend_million", {"n_devices": 5000, "duration_seconds": 5}, master_seed=4,
    ),
}


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_every_experiment_has_a_small_spec():
    assert set(SMALL) == set(EXPERIMENTS)


@pytest.mark.parametrize("name", sorted(SMALL))
def test_same_seed_same_bytes(name):
    a = run_experiment(SMALL[name])
    b = run_experiment(SMALL[name])
    assert a.summary_csv == b.summary_csv
    assert a.detail_csv == b.detail_csv
    assert a.summary_csv.splitlines()[0] == ",".join(SUMMARY_HEADER)
    assert a.detail_csv.splitlines()[0] == ",".join(DETAIL_HEADER)


def test_different_seed_differs():
    spec = SMALL["error_vs_samplesize"]
    other = ExperimentSpec(spec.name, spec.overrides, spec.repetitions, master_seed=99)
    assert run_experiment(spec).detail_csv != run_experiment(other).detail_csv


@pytest.mark.parametrize("name", ["error_vs_fraction", "error_vs_frequency"])
def test_detail_rows_support_the_summary(name):
    result = run_experiment(SMALL[name])
    details = rows_of(result.detail_csv)
    for d in details:
        eta = float(d["eta"])
        assert eta == relative_error(int(d["y_true"]), float(d["y_est"]))
    for s in rows_of(result.summary_csv):
        key = (s["n_devices"], s["fraction"], s["interval_s"])
        etas = [float(d["eta"]) for d in details if (d["n_devices"], d["fraction"], d["interval_s"]) == key]
        assert len(etas) == int(s["n_windows"])
        assert float(s["median_eta"]) == pytest.approx(statistics.median(etas), rel=1e-12)
        assert float(s["mean_eta"]) == pytest.approx(statistics.fmean(etas), rel=1e-12)
        assert float(s["std_eta"]) == pytest.approx(statistics.pstdev(etas), rel=1e-9)


def test_fraction_grid_shape():
    _, configs = configs_for(ExperimentSpec("error_vs_fraction"))
    assert len(configs) == 16
    assert {c.sensitive_fraction for c in configs} == {0.2, 0.4, 0.6, 0.8}
    assert {c.n_devices for c in configs} == {100, 250, 500, 1000}


def test_frequency_sweep_values():
    _, configs = configs_for(ExperimentSpec("error_vs_frequency"))
    assert [c.answer_interval_seconds for c in configs] == [1, 2, 5, 10, 20, 30]
    assert all(c.n_devices == 1_000_000 for c in configs)


def test_override_pins_axis():
    _, configs = configs_for(ExperimentSpec("error_vs_samplesize", {"n_devices": 42}))
    assert [c.n_devices for c in configs] == [42]


def test_spec_violations():
    assert ExperimentSpec("nope").violations()
    assert ExperimentSpec("error_vs_samplesize", {"seed": 1}).violations()
    assert ExperimentSpec("error_vs_samplesize", repetitions=0).violations()
    with pytest.raises(ValueError):
        run_experiment(ExperimentSpec("nope"))


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        run_experiment(ExperimentSpec("error_vs_samplesize", {"n_devices": 10}, repetitions=1, p=0.0))


def test_write_result_paths(tmp_path, monkeypatch):
    monkeypatch.setenv("LDPSTREAM_OUT_DIR", str(tmp_path))
    result = run_experiment(SMALL["error_vs_samplesize"])
    out, detail = write_result(result)
    assert out == default_out_path("error_vs_samplesize") == tmp_path / "error_vs_samplesize.csv"
    assert detail == detail_path_for(out) == tmp_path / "error_vs_samplesize.windows.csv"
    assert out.read_text() == result.summary_csv
    assert detail.read_text() == result.detail_csv


def test_summary_line_mentions_axis():
    line = run_experiment(SMALL["error_vs_samplesize"]).summary_line
    assert line.startswith("error_vs_samplesize: n_devices 300..300")
