import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmla.data_model import CvMode, EstimatorConfig, ObservationTable, make_fold_plan, validate_table
from dmla.errors import ConfigurationError, DataValidationError, InvalidPartitionError


def _table(n=6, p=3, **kw):
    rng = np.random.default_rng(0)
    args = dict(y=rng.standard_normal(n), d=rng.standard_normal(n), x=rng.standard_normal((n, p)),
                ids=[f"r{i}" for i in range(n)])
    args.update(kw)
    return ObservationTable(**args)


def test_single_element_folds():
    plan = make_fold_plan(5, 5, 7)
    assert sorted(plan.sizes()) == [1] * 5


def test_fold_sizes_for_333():
    assert sorted(make_fold_plan(333, 5, 1).sizes()) == [66, 66, 67, 67, 67]


def test_fold_plan_deterministic():
    assert make_fold_plan(10, 3, 42) == make_fold_plan(10, 3, 42)
    assert make_fold_plan(10, 3, 42).fingerprint() == make_fold_plan(10, 3, 42).fingerprint()


@given(st.integers(2, 400), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_fold_plan_partition_properties(n, k, seed):
    if n < k:
        with pytest.raises(InvalidPartitionError):
            make_fold_plan(n, k, seed)
        return
    plan = make_fold_plan(n, k, seed)
    sizes = plan.sizes()
    assert sizes.max() - sizes.min() <= 1
    assert sizes.min() >= 1
    covered = np.concatenate([plan.test_indices(f) for f in range(k)])
    np.testing.assert_array_equal(np.sort(covered), np.arange(n))
    for f in range(k):
        assert np.intersect1d(plan.train_indices(f), plan.test_indices(f)).size == 0


def test_fold_plan_rejects_single_fold():
    with pytest.raises(InvalidPartitionError):
        make_fold_plan(10, 1, 0)


def test_validate_pass():
    assert validate_table(_table()).ok
    assert validate_table(_table()).summary() == "pass"


def test_validate_names_nan_cell():
    t = _table()
    x = np.array(t.x)
    x[2, 1] = np.nan
    report = validate_table(_table(x=x))
    assert not report.ok
    [v] = report.violations
    assert (v.kind, v.column, v.row) == ("non_finite", "x_1", 2)


def test_validate_length_mismatch():
    report = validate_table(_table(y=np.zeros(5)))
    assert any(v.kind == "length_mismatch" and v.column == "y" for v in report.violations)


def test_validate_duplicate_ids_and_raise():
    t = _table(ids=["a", "b", "c", "a", "e", "f"])
    report = validate_table(t)
    assert [(v.kind, v.row) for v in report.violations] == [("duplicate_id", 3)]
    with pytest.raises(DataValidationError) as info:
        t.validate()
    assert info.value.violations == list(report.violations)


def test_validate_guess_columns_checked():
    report = validate_table(_table(y_guess=np.array([1, 2, np.inf, 4, 5, 6.0]), d_guess=np.zeros(6)))
    assert [(v.column, v.row) for v in report.violations] == [("y_guess", 2)]


def test_table_arrays_are_readonly_copies():
    y = np.arange(6.0)
    t = _table(y=y)
    y[0] = 99
    assert t.y[0] == 0
    with pytest.raises(ValueError):
        t.y[0] = 1


def test_without_guesses_and_take():
    t = _table(y_guess=np.arange(6.0), d_guess=np.arange(6.0))
    assert t.has_guesses and not t.without_guesses().has_guesses
    sub = t.take([4, 1])
    assert sub.ids == ("r4", "r1")
    np.testing.assert_array_equal(sub.y_guess, [4.0, 1.0])


@pytest.mark.parametrize("text", ["loocv", "kfold:5", "KFOLD:3"])
def test_cv_mode_roundtrip(text):
    assert str(CvMode.parse(text)) == text.lower()


@pytest.mark.parametrize("text", ["kfold", "kfold:1", "kfold:x", "bootstrap"])
def test_cv_mode_rejects(text):
    with pytest.raises(ConfigurationError):
        CvMode.parse(text)


def test_config_defaults_and_roundtrip():
    cfg = EstimatorConfig()
    assert cfg.k_folds == 5 and cfg.cv_mode.kind == "loocv" and not cfg.penalize_guess
    again = EstimatorConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.fingerprint() == cfg.fingerprint()
    assert EstimatorConfig(seed=1).fingerprint() != cfg.fingerprint()


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigurationError):
        EstimatorConfig.from_dict({"k_folds": 5, "lambda": 3})
    with pytest.raises(ConfigurationError):
        EstimatorConfig(k_folds=1)
    with pytest.raises(ConfigurationError):
        EstimatorConfig(lambda_min_ratio=1.5)
    with pytest.raises(ConfigurationError):
        EstimatorConfig(fixed_lambdas=(-1.0,))
