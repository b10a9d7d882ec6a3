import json

import numpy as np
import pytest

from chronosurv import cohort as C
from chronosurv.config import CohortConfig
from chronosurv.errors import InvalidConfigError, InvalidInputError, StratificationError
from oracles import kendall_tau_oracle, make_patient


@pytest.fixture(scope="module")
def signal_cohort():
    return C.generate_cohort(CohortConfig(n=200, beta=2.0), seed=7)


@pytest.fixture(scope="module")
def null_cohort():
    return C.generate_cohort(CohortConfig(n=200, beta=0.0), seed=7)


def _tau_deaths(cohort):
    dead = [p for p in cohort.patients if p.event]
    return kendall_tau_oracle([p.tmtv for p in dead], [p.time for p in dead])


def test_too_small_cohort_rejected():
    for n in (0, 3):
        with pytest.raises(InvalidConfigError) as info:
            C.generate_cohort(CohortConfig(n=n), seed=0)
        assert info.value.key == "cohort.n"


def test_null_cohort_has_no_rank_signal(null_cohort):
    assert abs(_tau_deaths(null_cohort)) < 0.2
    times = [p.time for p in null_cohort.patients]
    assert abs(kendall_tau_oracle([p.tmtv for p in null_cohort.patients], times)) < 0.2


def test_signal_cohort_pinned_rank_correlation(signal_cohort):
    # regression pin recorded from the first run (observed deaths only)
    tau = _tau_deaths(signal_cohort)
    assert tau < 0
    assert tau == pytest.approx(-0.2360888049126122, abs=1e-12)


def test_regeneration_is_byte_identical(small_cohort):
    again = C.generate_cohort(CohortConfig(n=12), seed=5)
    assert C.manifest_bytes(again.patients) == C.manifest_bytes(small_cohort.patients)
    assert C.manifest_hash(again.patients) == C.manifest_hash(small_cohort.patients)
    a = small_cohort.volumes["P0003"].load()
    b = again.volumes["P0003"].load()
    assert np.array_equal(a.hu, b.hu) and np.array_equal(a.suv, b.suv)
    other = C.generate_cohort(CohortConfig(n=12), seed=6)
    assert C.manifest_hash(other.patients) != C.manifest_hash(small_cohort.patients)


def test_records_satisfy_invariants(signal_cohort):
    for p in signal_cohort.patients:
        assert p.scan_day <= p.lfd_day
        assert 90 <= p.follow_up <= 1825
        if p.event:
            assert p.scan_day <= p.death_day <= p.lfd_day
        else:
            assert p.death_day is None
        assert p.tmtv >= 0 and p.dmax >= 0 and p.lesion_count >= 1


def test_patient_record_validation():
    fields = dict(id="x", scan_day=5, death_day=3, lfd_day=10, event=True, age=60.0, sex="male",
                  t_stage=None, n_stage=None, tmtv=1.0, dmax=0.0, lesion_count=1)
    with pytest.raises(InvalidInputError):
        C.PatientRecord(**fields)  # death before scan
    with pytest.raises(InvalidInputError):
        C.PatientRecord(**{**fields, "death_day": 8, "event": False})
    with pytest.raises(InvalidInputError):
        make_patient("x", 10, False, tmtv=-1.0)


def test_manifest_roundtrip(tmp_path, small_cohort):
    C.save_cohort(small_cohort, tmp_path)
    rows = json.loads((tmp_path / "manifest.json").read_text())
    assert list(rows[0]) == list(C.MANIFEST_FIELDS)
    loaded = C.load_cohort(tmp_path)
    assert loaded.patients == small_cohort.patients
    vs = loaded.volumes["P0000"].load()
    ref = small_cohort.volumes["P0000"].load()
    np.testing.assert_array_equal(vs.hu, ref.hu.astype(np.float32))
    assert len(list((tmp_path / "volumes").glob("*.f32"))) == 3 * 12


def test_manifest_rejects_unknown_fields(tmp_path, small_cohort):
    rows = json.loads(C.manifest_bytes(small_cohort.patients[:1]))
    rows[0]["extra"] = 1
    (tmp_path / "manifest.json").write_text(json.dumps(rows))
    with pytest.raises(InvalidInputError):
        C.read_manifest(tmp_path / "manifest.json")


# ------------------------------------------------------------------- folds

def test_folds_four_patients():
    pts = [make_patient("e1", 10, True), make_patient("e2", 20, True),
           make_patient("c1", 30, False), make_patient("c2", 40, False)]
    folds = C.split_folds(pts, 2, seed=0)
    for f in range(2):
        members = folds.members(f)
        assert sorted(m[0] for m in members) == ["c", "e"]


def test_folds_ten_patients_five_events():
    pts = [make_patient(f"p{i}", 10 + i, i < 5) for i in range(10)]
    folds = C.split_folds(pts, 5, seed=3)
    for f in range(5):
        assert sum(1 for pid in folds.members(f) if int(pid[1:]) < 5) == 1


def test_folds_stratified_and_deterministic(signal_cohort):
    folds = C.split_folds(signal_cohort, 5, seed=11)
    assert folds.fold_of == C.split_folds(signal_cohort, 5, seed=11).fold_of
    by_id = signal_cohort.by_id()
    overall = np.mean([p.event for p in signal_cohort.patients])
    sizes = []
    for f in range(5):
        members = folds.members(f)
        sizes.append(len(members))
        assert abs(np.mean([by_id[i].event for i in members]) - overall) <= 0.10
    assert max(sizes) - min(sizes) <= 1
    assert sorted(folds.fold_of) == sorted(by_id)


def test_folds_infeasible():
    pts = [make_patient(f"p{i}", 10 + i, True) for i in range(6)]
    with pytest.raises(StratificationError):
        C.split_folds(pts, 2, seed=0)
    with pytest.raises(StratificationError):
        C.split_folds(pts, 1, seed=0)


# ---------------------------------------------------------------- features

def _stats(**kw):
    base = dict(age_mean=60.0, age_std=10.0, tmtv_mean=100.0, tmtv_std=50.0, dmax_q3=40.0, lesion_median=2.0)
    base.update(kw)
    return C.CohortStats(**base)


def test_feature_layout_and_missing_stage():
    p = make_patient("a", 10, True, age=70.0, sex="female", t_stage=None, n_stage="N2", tmtv=150.0,
                     dmax=40.0, lesion_count=3)
    fv = C.featurize_tabular(p, _stats())
    assert len(fv.values) == len(fv.names) == 15
    v = dict(zip(fv.names, fv.values))
    assert v["age"] == 1.0 and v["sex"] == 0.0 and v["tmtv"] == 1.0
    assert v["dmax_gt_q3"] == 0.0  # equal to Q3 is not above it
    assert v["lesions_gt_median"] == 1.0
    assert [v[t] for t in C.T_STAGES] == [0, 0, 0, 0] and v["T_missing"] == 1.0
    assert [v[n] for n in C.N_STAGES] == [0, 0, 1, 0] and v["N_missing"] == 0.0


def test_lesion_median_from_three_patients():
    pts = [make_patient(f"p{k}", 10, False, lesion_count=k) for k in (1, 2, 5)]
    stats = C.compute_cohort_stats(pts)
    assert stats.lesion_median == sorted([1, 2, 5])[1]
    assert C.featurize_tabular(pts[2], stats).values[4] == 1.0
    assert C.featurize_tabular(pts[1], stats).values[4] == 0.0


def test_constant_columns_do_not_blow_up():
    pts = [make_patient(f"p{i}", 10, False, age=50.0) for i in range(4)]
    stats = C.compute_cohort_stats(pts)
    assert stats.age_std == 1.0
    assert np.all(np.isfinite(C.feature_matrix(pts, stats)))


def test_features_use_training_statistics_only(small_cohort):
    train, test = small_cohort.patients[:8], small_cohort.patients[8:]
    stats = C.compute_cohort_stats(train)
    before = C.feature_matrix(small_cohort.patients, stats)
    changed = C.replace_patient(test[0], age=99.0, tmtv=1e4, t_stage=None)
    after = C.feature_matrix(small_cohort.patients[:8] + [changed] + test[1:], stats)
    keep = [i for i in range(12) if i != 8]
    assert np.array_equal(before[keep], after[keep])
