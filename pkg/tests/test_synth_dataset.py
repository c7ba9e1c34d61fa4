import numpy as np
import pytest

from ecgunlearn.dataset import SegmentSet, build_segment_set, split_by_record
from ecgunlearn.rng import derive_seed, fnv1a64, make_rng, splitmix64
from ecgunlearn.signal import DiagnosticClass, fft_analyze
from ecgunlearn.synth import SynthConfig, resolve_class_mix, synth_generate


def small(**kw):
    base = dict(n_patients=3, records_per_patient=2, n_samples=1000, n_leads=4, seed=5)
    base.update(kw)
    return SynthConfig(**base)


def test_same_seed_bit_identical():
    a, b = synth_generate(small()), synth_generate(small())
    assert [r.record_id for r in a] == [r.record_id for r in b]
    for ra, rb in zip(a, b):
        assert ra.leads.tobytes() == rb.leads.tobytes() and ra.label is rb.label
    assert synth_generate(small(seed=6))[0].leads.tobytes() != a[0].leads.tobytes()


def test_class_mix_normal_only():
    recs = synth_generate(small(class_mix={"Normal": 1.0}, n_patients=5))
    assert {r.label for r in recs} == {DiagnosticClass.NORM}


def test_class_mix_validation():
    with pytest.raises(ValueError):
        resolve_class_mix({"NORM": 0.7})
    with pytest.raises(ValueError):
        resolve_class_mix({"NORM": 1.2, "MI": -0.2})
    mix = resolve_class_mix({"NORM": 0.5, "Abnormal": 0.5})
    assert mix[DiagnosticClass.MI] == pytest.approx(0.125)


def test_patient_identity_is_learnable():
    recs = synth_generate(SynthConfig(n_patients=2, records_per_patient=2, class_mix={"NORM": 1.0}, seed=1))
    data, _ = build_segment_set(recs)
    # beat phase differs between windows, so compare phase-free spectral magnitudes
    flat = np.stack([fft_analyze(x).magnitude.ravel() for x in data.x])
    pids = np.array(data.patient_ids)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    same = pids[:, None] == pids[None]
    off_diag = ~np.eye(len(data), dtype=bool)
    assert d[same & off_diag].mean() < d[~same].mean()


def test_variant_patients_are_marked_by_count():
    recs = synth_generate(small(variant_fraction=1.0, n_patients=2))
    assert len(recs) == 4


def test_build_segment_set_rejects_bad_records():
    recs = synth_generate(small(n_patients=2, records_per_patient=1))
    recs[0].leads[1] = 0.0
    data, rejected = build_segment_set(recs)
    assert rejected == [(recs[0].record_id, "blank lead 1")]
    assert set(data.record_ids) == {recs[1].record_id}


def test_split_by_record_keeps_records_whole():
    data, _ = build_segment_set(synth_generate(small(n_patients=5)))
    tr, te = split_by_record(data, make_rng(0), 0.6)
    assert not set(tr.record_ids) & set(te.record_ids)
    assert len(tr) + len(te) == len(data)
    assert len(set(tr.record_ids)) == 6


def test_segment_set_helpers():
    data, _ = build_segment_set(synth_generate(small()))
    p = data.patients()[0]
    assert len(data.of_patient(p)) + len(data.without_patient(p)) == len(data)
    both = data.of_patient(p).concat(data.without_patient(p))
    assert sorted(both.ids) == sorted(data.ids)
    with pytest.raises(ValueError):
        data.concat(data)  # duplicate ids
    with pytest.raises(ValueError):
        SegmentSet(np.zeros((2, 1, 3)), [0], ["a", "b"], ["p", "p"], ["r", "r"])


def test_seed_derivation_reference_values():
    # FNV-1a-64 of the empty string is its offset basis; splitmix64 reference output for 0
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert derive_seed(0, "train") == splitmix64(fnv1a64(b"train"))
    assert derive_seed(1, "train") != derive_seed(0, "train")
    assert make_rng(3).integers(1 << 30) == make_rng(3).integers(1 << 30)
