import math

import numpy as np
import pytest

from depflow import severity as S


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def random_bank(seed=0, dim=32):
    rng = np.random.default_rng(seed)
    return S.PrototypeBank(np.stack([unit(rng.normal(size=dim)) for _ in range(5)]), [1] * 5)


def test_subject_embedding_cases():
    v = np.arange(4.0)
    assert np.array_equal(S.subject_embedding([v]), v)
    assert np.allclose(S.subject_embedding([v, -v]), 0)
    assert np.allclose(S.subject_embedding([v] * 7), v)


def test_build_one_subject_per_bin():
    rng = np.random.default_rng(1)
    E = rng.normal(size=(5, 8))
    bank = S.build_prototypes(E, [0, 1, 2, 3, 4])
    assert np.allclose(bank.prototypes, E / np.linalg.norm(E, axis=1, keepdims=True))


def test_build_duplicates_identical():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(5, 8))
    a = S.build_prototypes(E, range(5))
    b = S.build_prototypes(np.vstack([E, E]), list(range(5)) * 2)
    assert np.allclose(a.prototypes, b.prototypes)


def test_build_missing_bin_named():
    with pytest.raises(ValueError, match=r"\[3\]"):
        S.build_prototypes(np.ones((4, 3)), [0, 1, 2, 4])


def test_build_degenerate_bin():
    E = np.array([[1.0, 0], [-1.0, 0], [0, 1.0], [1, 1.0], [1, 2.0], [2, 1.0]])
    with pytest.raises(ValueError, match="bin 0"):
        S.build_prototypes(E, [0, 0, 1, 2, 3, 4])


def test_bank_json_roundtrip(tmp_path):
    bank = random_bank()
    bank.save(tmp_path / "bank.json")
    back = S.PrototypeBank.load(tmp_path / "bank.json")
    assert np.array_equal(back.prototypes, bank.prototypes)
    assert back.centers == bank.centers


@pytest.mark.parametrize("s,a", [(0, -1), (12, 0), (24, 1), (30, 1), (18, 0.5)])
def test_alpha(s, a):
    assert S.alpha(s) == pytest.approx(a)


@pytest.mark.parametrize("s,expected", [(2, (0, 1, 0.0)), (4.5, (0, 1, 0.5)), (22, (3, 4, 1.0)),
                                        (0, (0, 1, 0.0)), (24, (3, 4, 1.0)), (12, (2, 3, 0.0))])
def test_locate_and_tau(s, expected):
    i, j, tau = S.locate_and_tau(s)
    assert (i, j) == expected[:2]
    assert tau == pytest.approx(expected[2])


def test_locate_rejects_out_of_range():
    with pytest.raises(ValueError):
        S.locate_and_tau(25)


def test_slerp_bisector():
    e0, e1 = np.eye(32)[0], np.eye(32)[1]
    out = S.slerp(e0, e1, 0.5)
    assert np.allclose(out[:2], math.sqrt(2) / 2) and np.allclose(out[2:], 0)


def test_slerp_endpoints_exact():
    bank = random_bank()
    p0, p1 = bank.prototypes[0], bank.prototypes[1]
    assert np.array_equal(S.slerp(p0, p1, 0.0), p0)
    assert np.array_equal(S.slerp(p0, p1, 1.0), p1)


def test_slerp_property_sweep():
    rng = np.random.default_rng(0)
    taus = np.linspace(0, 1, 11)
    for _ in range(1000):
        p0, p1 = unit(rng.normal(size=32)), unit(rng.normal(size=32))
        omega = math.acos(np.clip(p0 @ p1, -1, 1))
        for tau in taus:
            v = S.slerp(p0, p1, tau)
            assert abs(np.linalg.norm(v) - 1) <= 1e-6
            assert abs(math.acos(np.clip(v @ p0, -1, 1)) - tau * omega) <= 1e-6


def test_slerp_near_parallel_fallback():
    p0 = np.eye(4)[0]
    p1 = unit(p0 + 1e-7 * np.eye(4)[1])
    v = S.slerp(p0, p1, 0.3)
    assert np.isfinite(v).all() and abs(np.linalg.norm(v) - 1) < 1e-12


def test_slerp_rejects_bad_input():
    e = np.eye(3)
    with pytest.raises(ValueError):
        S.slerp(e[0], -e[0], 0.5)
    with pytest.raises(ValueError):
        S.slerp(2 * e[0], e[1], 0.5)
    with pytest.raises(ValueError):
        S.slerp(e[0], e[1], 1.5)


def test_condition_at_centers():
    bank = random_bank(3)
    for k, c in enumerate(bank.centers):
        assert np.array_equal(S.severity_condition(c, bank), bank.prototypes[k])


def test_condition_sweep_smooth():
    bank = random_bank(4)
    outs = [S.severity_condition(s, bank) for s in np.arange(0, 24.01, 0.5)]
    for a, b, c in zip(outs, outs[1:], outs[2:]):
        assert a @ b >= a @ c - 1e-12


def test_five_levels_distinct():
    bank = random_bank(5)
    conds = [S.severity_condition(c, bank) for c in bank.centers]
    for i in range(5):
        for j in range(i + 1, 5):
            assert not np.allclose(conds[i], conds[j])
