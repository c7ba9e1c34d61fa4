import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgunlearn.signal import (
    DatasetError,
    DiagnosticClass,
    EcgRecord,
    class_index,
    fft_analyze,
    load_dataset,
    moving_average,
    preprocess_record,
    segment_record,
    validate_record,
    write_dataset,
    zscore,
)


def record(leads, pid="P1", label=DiagnosticClass.NORM, rid=""):
    return EcgRecord(pid, np.asarray(leads, dtype=float), label, 500.0, rid)


def naive_dft(x):
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


# loading ----------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [record(rng.standard_normal((12, 500)), "A", rid="a1"),
            record(rng.standard_normal((12, 500)), "B", DiagnosticClass.MI, rid="b1")]
    write_dataset(recs, tmp_path)
    back = load_dataset(tmp_path)
    assert [r.record_id for r in back] == ["a1", "b1"]
    assert back[1].label is DiagnosticClass.MI
    np.testing.assert_array_equal(back[0].leads, recs[0].leads)


def test_wrong_lead_count_names_file(tmp_path):
    write_dataset([record(np.random.default_rng(1).standard_normal((11, 500)), rid="short")], tmp_path)
    with pytest.raises(DatasetError, match="short.csv"):
        load_dataset(tmp_path)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.tsv").write_text("record_file\tpatient_id\tlabel\tsampling_rate\n")
    assert load_dataset(tmp_path) == []


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="missing manifest"):
        load_dataset(tmp_path)


def test_lenient_loading_skips_bad_files(tmp_path, caplog):
    rng = np.random.default_rng(2)
    write_dataset([record(rng.standard_normal((12, 500)), rid="ok"),
                   record(rng.standard_normal((12, 500)), rid="bad")], tmp_path)
    (tmp_path / "bad.csv").write_text("1,2,x\n")
    assert [r.record_id for r in load_dataset(tmp_path, strict=False)] == ["ok"]
    assert "bad.csv" in caplog.text


# validation -------------------------------------------------------------------------

def test_blank_lead_rejected():
    x = np.random.default_rng(0).standard_normal((12, 500))
    x[3] = 0.0
    v = validate_record(record(x))
    assert not v and v.reason == "blank lead 3"


def test_noise_accepted():
    assert validate_record(record(np.random.default_rng(0).standard_normal((12, 500))))


def test_nan_rejected():
    x = np.random.default_rng(0).standard_normal((12, 500))
    x[5, 17] = np.nan
    assert validate_record(record(x)).reason == "non-finite"


# segmentation -----------------------------------------------------------------------

def test_ten_segments_per_record():
    segs = segment_record(record(np.zeros((12, 5000))))
    assert len(segs) == 10 and all(s.leads.shape == (12, 500) for s in segs)


def test_single_window():
    assert len(segment_record(record(np.zeros((12, 500))))) == 1


def test_partial_window_rejected():
    with pytest.raises(DatasetError):
        segment_record(record(np.zeros((12, 4999))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4))
def test_segmentation_partition_law(n_windows, leads):
    x = np.random.default_rng(n_windows).standard_normal((leads, 500 * n_windows))
    segs = segment_record(record(x))
    assert [s.window for s in segs] == list(range(n_windows))
    np.testing.assert_array_equal(np.concatenate([s.leads for s in segs], axis=1), x)


# filtering --------------------------------------------------------------------------

def test_moving_average_hand_cases():
    np.testing.assert_array_equal(moving_average(np.full(9, 2.5), 5), np.full(9, 2.5))
    x = np.random.default_rng(0).standard_normal(20)
    np.testing.assert_array_equal(moving_average(x, 1), x)
    out = moving_average(np.array([0.0, 3.0, 0.0, 0.0, 0.0]), 3)
    assert out[1] == 1.0


def test_moving_average_rejects_even_window():
    with pytest.raises(ValueError):
        moving_average(np.zeros(10), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([1, 3, 5, 7]))
def test_moving_average_preserves_mean(seed, window):
    x = np.random.default_rng(seed).standard_normal((2, 50))
    np.testing.assert_allclose(moving_average(x, window).mean(axis=1), x.mean(axis=1), atol=1e-12)


# spectrum ---------------------------------------------------------------------------

def test_constant_lead_spectrum_is_dc():
    spec = fft_analyze(np.full((1, 500), 3.0))
    assert spec.magnitude[0, 0] > 0 and np.all(spec.magnitude[0, 1:] < 1e-9)


def test_sinusoid_peak_against_naive_dft():
    t = np.arange(500) / 500.0
    x = np.sin(2 * np.pi * 10 * t)
    spec = fft_analyze(x[None])
    ref = np.abs(naive_dft(x))
    assert int(np.argmax(ref)) == 10
    assert spec.peak_frequency() == 10.0
    np.testing.assert_allclose(spec.magnitude[0], ref, atol=1e-6)


def test_parseval():
    x = np.random.default_rng(3).standard_normal((3, 500))
    spec = fft_analyze(x)
    energy = (x ** 2).sum(axis=1)
    np.testing.assert_allclose(spec.energy(), energy, rtol=1e-6)
    # same energy from the naive DFT, independently of numpy's FFT
    naive = np.array([np.abs(naive_dft(row)) for row in x])
    w = np.full(naive.shape[1], 2.0)
    w[0] = w[-1] = 1.0
    np.testing.assert_allclose((naive ** 2 * w).sum(axis=1) / 500, energy, rtol=1e-6)


# normalization ----------------------------------------------------------------------

def test_zscore_cases():
    x = np.random.default_rng(5).standard_normal((2, 400))
    z = zscore(x)
    np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(zscore(z), z, atol=1e-12)
    np.testing.assert_array_equal(zscore(np.full((1, 10), 7.0)), 0.0)


def test_preprocess_output_is_normalized():
    segs = preprocess_record(record(np.random.default_rng(6).standard_normal((12, 1000))))
    for s in segs:
        np.testing.assert_allclose(s.leads.mean(axis=1), 0.0, atol=1e-10)


# labels -----------------------------------------------------------------------------

def test_class_index_names():
    assert class_index("Normal", "binary") == 0
    assert class_index("abnormal", "binary") == 1
    assert class_index("NORMAL", "superclass") == class_index("NORM", "superclass") == 0
    assert class_index("HYP", "superclass") == 4
    with pytest.raises(DatasetError):
        class_index("MI", "binary")
