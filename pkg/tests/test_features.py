from __future__ import annotations

import math
import statistics

import numpy as np
import pytest
from conftest import random_trace
from hypothesis import given
from hypothesis import strategies as st
from oracles import entropy_of_counts, exact_pvariance
from oracles import features as oracle_features

from evadebench.candidates import CandidateConfig
from evadebench.features import (
    COUNT_COLUMNS,
    FEATURE_NAMES,
    N_FEATURES,
    FeatureMatrix,
    FeatureSpec,
    average_features,
    extract,
    load_dataset,
    read_feature_csv,
    save_dataset,
    shannon_entropy,
    window_entropy,
    window_variance,
    write_feature_csv,
)
from evadebench.simulator import WorkloadSpec, simulate
from evadebench.trace import StorageEvent


def assert_close(got: np.ndarray, want: np.ndarray, rel: float = 1e-9) -> None:
    got, want = np.asarray(got), np.asarray(want)
    scale = np.maximum(np.abs(want), 1e-300)
    err = np.where(want == 0, np.abs(got), np.abs(got - want) / scale)
    assert err.max() <= rel, (np.unravel_index(err.argmax(), err.shape), err.max())


# -- primitives -----------------------------------------------------------------------


def test_entropy_of_all_zero_bytes():
    hist = [0] * 256
    hist[0] = 4096
    assert window_entropy([StorageEvent(0, "write", 0, 4096, tuple(hist))]) == 0.0


def test_entropy_of_each_byte_once():
    assert window_entropy([StorageEvent(0, "write", 0, 256, tuple([1] * 256))]) == 8.0


def test_merged_histogram_entropy():
    a, b = [0] * 256, [0] * 256
    a[ord("a")] = 128
    b[ord("b")] = 128
    ev = [StorageEvent(0, "write", 0, 128, tuple(a)), StorageEvent(1, "write", 0, 128, tuple(b))]
    assert window_entropy(ev) == 1.0


def test_entropy_fallback_is_size_weighted():
    ev = [StorageEvent(0, "write", 0, 4096, None, 8.0), StorageEvent(1, "write", 0, 12288, None, 4.0)]
    assert window_entropy(ev) == pytest.approx(5.0, rel=1e-12)


def test_entropy_of_no_events():
    assert window_entropy([]) == 0.0


@pytest.mark.parametrize("addrs,want", [([100, 100], 0.0), ([0, 10], 25.0), ([7], 0.0), ([], 0.0)])
def test_variance_examples(addrs, want):
    assert window_variance(addrs) == want


def test_variance_random_addresses_match_exact_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        addrs = rng.integers(0, 1 << 40, 1000)
        assert_close(window_variance(addrs), exact_pvariance(addrs))


@given(st.lists(st.integers(min_value=0, max_value=10_000), min_size=1, max_size=256))
def test_shannon_entropy_bounds(counts):
    h = shannon_entropy(counts)
    distinct = sum(1 for c in counts if c)
    assert 0.0 <= h <= 8.0
    if distinct:
        assert h <= math.log2(distinct) + 1e-12
    assert h == pytest.approx(entropy_of_counts(counts), abs=1e-12)


@given(st.lists(st.integers(min_value=0, max_value=2**48), min_size=0, max_size=60))
def test_window_variance_matches_statistics(addrs):
    want = float(statistics.pvariance(addrs)) if len(addrs) >= 2 else 0.0
    got = window_variance(addrs)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-6)


# -- extract ----------------------------------------------------------------------------


@pytest.mark.parametrize("t_window,rows", [(1.0, 30), (0.1, 300), (0.5, 60)])
def test_shape_contract(env, t_window, rows):
    tr = simulate(WorkloadSpec("encryptor", candidate=CandidateConfig(1, 1.0, 0.0)), env, 1)
    fm = extract(tr, FeatureSpec(t_window, 30.0))
    assert fm.values.shape == (rows, N_FEATURES)
    assert fm.violations() == []


def test_column_names_frozen():
    assert FEATURE_NAMES[0] == "storage_write_entropy"
    assert FEATURE_NAMES[7] == "page4k_write_count"
    assert FEATURE_NAMES[17] == "mmio_exec_count"
    assert FEATURE_NAMES[18] == "mmio_read_write_count"
    assert FEATURE_NAMES[22] == "gpa_read_write_variance"
    assert len(FEATURE_NAMES) == 23


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("t_window,t_d,unit", [(0.1, 3.0, False), (0.5, 3.0, False), (0.25, 2.0, True)])
def test_extract_matches_oracle(seed, t_window, t_d, unit):
    tr = random_trace(np.random.default_rng(seed), duration=3.0)
    spec = FeatureSpec(t_window, t_d, "unit_interval" if unit else "bits_per_byte")
    assert_close(extract(tr, spec).values, np.array(oracle_features(tr, t_window, t_d, unit)))


def test_extract_matches_oracle_on_simulated_traces(env):
    for spec in (WorkloadSpec("encryptor", candidate=CandidateConfig(2, 0.5, 0.025), duration=4.0),
                 WorkloadSpec("benign_archetype", archetype="browser_like", duration=4.0)):
        tr = simulate(spec, env, 21)
        assert_close(extract(tr, FeatureSpec(0.5, 4.0)).values, np.array(oracle_features(tr, 0.5, 4.0)))


def test_short_trace_rejected(env):
    tr = simulate(WorkloadSpec("encryptor", candidate=CandidateConfig(1, 1.0, 0.0), duration=5.0), env, 0)
    with pytest.raises(ValueError, match="shorter"):
        extract(tr, FeatureSpec(1.0, 30.0))


@pytest.mark.parametrize("bad", [(0.3, 1.0), (0.0, 30.0), (1.0, -1.0), (0.7, 30.0)])
def test_spec_multiple_contract(bad):
    with pytest.raises(ValueError):
        FeatureSpec(*bad)


def test_events_beyond_t_d_ignored(rng):
    tr = random_trace(rng, duration=3.0)
    fm = extract(tr, FeatureSpec(0.5, 2.0))
    m = tr.memory_events
    inside = m.timestamp < 2_000_000_000
    assert fm.values[:, list(COUNT_COLUMNS)].sum() == inside.sum()


@given(st.integers(min_value=0, max_value=10_000))
def test_count_and_throughput_conservation(seed):
    tr = random_trace(np.random.default_rng(seed), duration=2.0, n_storage=60, n_memory=120)
    spec = FeatureSpec(0.25, 2.0)
    x = extract(tr, spec).values
    m, s = tr.memory_events, tr.storage_events
    for kind in range(3):
        for op in range(4):
            want = int(((m.page_kind == kind) & (m.op == op)).sum())
            assert x[:, 7 + kind * 4 + op].sum() == want
    assert x[:, 1].sum() * spec.t_window == pytest.approx(float(s.size[s.op == 1].sum()), rel=1e-12)
    assert x[:, 2].sum() * spec.t_window == pytest.approx(float(s.size[s.op == 0].sum()), rel=1e-12)
    assert np.all((x[:, [0, 5, 6]] >= 0) & (x[:, [0, 5, 6]] <= 8))
    assert np.all(x[:, list(COUNT_COLUMNS)] == np.round(x[:, list(COUNT_COLUMNS)]))


def test_simulated_mmio_exec_and_read_write_columns_are_zero(env):
    for spec in (WorkloadSpec("encryptor", candidate=CandidateConfig(3, 1.0, 0.1)),
                 WorkloadSpec("benign_archetype", archetype="compressor")):
        x = extract(simulate(spec, env, 0), FeatureSpec(1.0, 30.0)).values
        assert np.all(x[:, 17] == 0) and np.all(x[:, 18] == 0)
        assert np.any(x[:, 15] > 0) and np.any(x[:, 16] > 0)


def test_unit_interval_normalization(rng):
    tr = random_trace(rng)
    a = extract(tr, FeatureSpec(0.5, 3.0)).values
    b = extract(tr, FeatureSpec(0.5, 3.0, "unit_interval")).values
    assert np.allclose(b[:, [0, 5, 6]] * 8, a[:, [0, 5, 6]])
    assert np.array_equal(np.delete(a, [0, 5, 6], axis=1), np.delete(b, [0, 5, 6], axis=1))


def test_matrix_rejects_wrong_width():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((3, 22)), "benign", FeatureSpec(1.0, 3.0))


def test_violations_flag_non_finite_and_bad_counts():
    v = np.zeros((3, 23))
    v[0, 1] = np.nan
    v[1, 8] = 0.5
    problems = FeatureMatrix(v, "benign", FeatureSpec(1.0, 3.0)).violations()
    assert len(problems) >= 2


# -- serialization ------------------------------------------------------------------------


def test_csv_round_trip(tmp_path, rng):
    fm = extract(random_trace(rng), FeatureSpec(0.5, 3.0))
    p = tmp_path / "f.csv"
    write_feature_csv(fm, p)
    back = read_feature_csv(p)
    assert back == fm
    assert back.provenance == fm.provenance
    assert p.read_text().splitlines()[0].split(",") == list(FEATURE_NAMES)


def test_dataset_round_trip_and_bytes(tmp_path, rng):
    mats = [extract(random_trace(rng, label=lab), FeatureSpec(0.5, 3.0)) for lab in ("benign", "ransomware")]
    save_dataset(mats, tmp_path / "a.npz")
    save_dataset(mats, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_dataset(tmp_path / "a.npz")
    assert [m.label for m in back] == ["benign", "ransomware"]
    assert all(x == y for x, y in zip(back, mats))


def test_average_features(rng):
    spec = FeatureSpec(0.5, 3.0)
    mats = [extract(random_trace(np.random.default_rng(s)), spec) for s in range(3)]
    avg = average_features(mats)
    assert np.allclose(avg.values, (mats[0].values + mats[1].values + mats[2].values) / 3)
    assert avg.provenance["trials"] == 3
