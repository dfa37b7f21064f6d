import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cake.errors import ScmError
from cake.scm import (
    ScmSpec, default_scm, dump_scm, load_scm, scm_adjustment_estimate, scm_interventional_bruteforce,
    scm_observational, total_variation, verify_adjustment,
)

RES = Path(__file__).resolve().parents[1] / "src" / "cake" / "resources"


def hand_do(p_d, p_y_given_c, x):
    """Mutilated-graph enumeration written out for a binary model whose label
    depends on C only: D keeps its prior, (C, S_C, S_I) are clamped to x."""
    c0, sc0, si0 = x
    out = np.zeros(2)
    for c, sc, si, d in itertools.product((0, 1), repeat=4):
        if (c, sc, si) != (c0, sc0, si0):
            continue
        for y in (0, 1):
            out[y] += p_d[d] * p_y_given_c[c][y]
    return out / out.sum()


def test_bruteforce_matches_hand_enumeration():
    scm = default_scm()
    for x in scm.observations():
        want = hand_do([0.6, 0.4], [[0.9, 0.1], [0.15, 0.85]], x)
        assert np.allclose(scm_interventional_bruteforce(scm, x), want, atol=1e-15)


def test_adjustment_full_set_matches_bruteforce():
    scm = default_scm()
    for x in scm.observations():
        assert total_variation(scm_adjustment_estimate(scm, x), scm_interventional_bruteforce(scm, x)) < 1e-10


def test_deterministic_label_gives_point_mass():
    scm = ScmSpec.from_label_table([0.5, 0.5], [0.4, 0.6], [[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.1, 0.9]],
                                   [[1.0, 0.0], [0.0, 1.0]])
    for x in scm.observations():
        out = scm_interventional_bruteforce(scm, x)
        assert out[x[0]] == 1.0


def test_singleton_factual_style_is_observational():
    scm = default_scm()
    for x in scm.observations():
        adj = scm_adjustment_estimate(scm, x, styles=[(x[1], x[2])])
        assert np.allclose(adj, scm_observational(scm, x), atol=1e-15)


def test_empty_style_set_rejected():
    with pytest.raises(ScmError):
        scm_adjustment_estimate(default_scm(), (0, 0, 0), styles=[])


def test_unknown_observation_rejected():
    with pytest.raises(ScmError):
        scm_interventional_bruteforce(default_scm(), (5, 5, 5))


def test_bad_rows_rejected():
    with pytest.raises(ScmError):
        ScmSpec.from_label_table([0.5, 0.6], [0.5, 0.5], [[1, 0], [0, 1]], [[1, 0], [0, 1]], [[1, 0], [0, 1]])


def test_shipped_scm_file_passes():
    rep = verify_adjustment(load_scm(RES / "default_scm.ini"))
    assert rep.passed and rep.max_tv < 1e-10


def test_style_dependent_scm_diverges_from_conditional():
    scm = load_scm(RES / "style_dependent_scm.ini")
    assert not scm.label_depends_on_concept_only
    rep = verify_adjustment(scm)
    assert rep.observational_gap > 0.1


def test_single_style_value_adjustment_equals_conditional():
    scm = ScmSpec.from_label_table([0.3, 0.7], [0.5, 0.5], [[1.0], [1.0]], [[1.0], [1.0]], [[0.8, 0.2], [0.3, 0.7]])
    for x in scm.observations():
        assert np.allclose(scm_adjustment_estimate(scm, x), scm_observational(scm, x), atol=1e-15)


def test_dump_load_round_trip(tmp_path):
    p = tmp_path / "scm.ini"
    p.write_text(dump_scm(default_scm()))
    back = load_scm(p)
    assert np.array_equal(back.p_y, default_scm().p_y)


def _prob(n):
    return st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n).map(lambda v: list(np.array(v) / np.sum(v)))


@settings(max_examples=40, deadline=None)
@given(_prob(2), _prob(3), st.lists(_prob(2), min_size=2, max_size=2), st.lists(_prob(3), min_size=2, max_size=2),
       st.lists(_prob(2), min_size=3, max_size=3))
def test_adjustment_identity_random_models(p_d, p_c, p_sc, p_si, p_y):
    scm = ScmSpec.from_label_table(p_d, p_c, p_sc, p_si, p_y)
    for x in scm.observations():
        brute = scm_interventional_bruteforce(scm, x)
        assert abs(brute.sum() - 1.0) < 1e-12
        assert total_variation(scm_adjustment_estimate(scm, x), brute) < 1e-10
