from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_evolve.tasks import (
    HADAMARD_29_BEST_DET,
    CirclePacking,
    DegenerateInputError,
    DomainError,
    HadamardMatrix,
    SchemaError,
    StepFunction,
    autoconvolution_nodes,
    autocorr_norms,
    check_size,
    evaluate,
    evaluate_autocorr,
    evaluate_circles,
    evaluate_hadamard,
    exact_determinant,
    hadamard_score,
    parse_solution,
    seed_solution,
)

from oracles import autocorr_ratio_exact, autocorr_ratio_numeric, circle_valid, cofactor_det, fraction_det

pm_matrices = st.integers(1, 7).flatmap(
    lambda n: st.lists(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n), min_size=n, max_size=n)
)
step_values = st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 100)), min_size=1, max_size=40).filter(
    lambda v: any(x > 0 for x in v)
)


# -- parsing -----------------------------------------------------------------


def test_parse_hadamard_2x2():
    m = parse_solution("hadamard", b'{"n":2,"entries":[[1,1],[1,-1]]}')
    assert isinstance(m, HadamardMatrix) and m.n == 2


def test_parse_rejects_zero_entry():
    with pytest.raises(DomainError, match=r"entry not in \{-1,\+1\}"):
        parse_solution("hadamard", '{"n":2,"entries":[[1,0],[1,-1]]}')


def test_parse_rejects_negative_step_value():
    with pytest.raises(DomainError):
        parse_solution("autocorr", '{"n":2,"values":[1.0,-0.5]}')


@pytest.mark.parametrize(
    "task,text",
    [
        ("hadamard", '{"n":3,"entries":[[1,1],[1,-1]]}'),
        ("hadamard", '{"n":2,"entries":[[1,1,1],[1,-1,1]]}'),
        ("autocorr", '{"n":3,"values":[1.0,2.0]}'),
        ("circle_packing", '{"circles":[{"x":0.5,"y":0.5}]}'),
        ("hadamard", '{"task":"autocorr","n":1,"values":[1.0]}'),
        ("hadamard", "not json"),
        ("hadamard", "[1, 2]"),
    ],
)
def test_parse_schema_errors(task, text):
    with pytest.raises(SchemaError):
        parse_solution(task, text)


def test_parse_rejects_negative_radius():
    with pytest.raises(DomainError):
        parse_solution("circle_packing", '{"circles":[{"x":0.5,"y":0.5,"r":-0.1}]}')


def test_payload_json_round_trip():
    for task in ("hadamard", "autocorr", "circle_packing"):
        p = seed_solution(task, 5)
        assert parse_solution(task, json.dumps(p.to_json())) == p


# -- hadamard ----------------------------------------------------------------


def test_hadamard_2x2_determinant():
    ev = evaluate_hadamard(HadamardMatrix.from_rows([[1, 1], [1, -1]]))
    assert ev.score == 2.0 and ev.valid
    assert ev.detail["log10_abs_det"] == pytest.approx(0.30103, abs=1e-5)


def test_singular_matrix_scores_zero_but_is_valid():
    ev = evaluate_hadamard(HadamardMatrix.from_rows([[1, 1], [1, 1]]))
    assert ev.score == 0.0 and ev.valid
    assert ev.detail["log10_abs_det"] == -999.0


def test_non_square_rejected():
    with pytest.raises(SchemaError):
        exact_determinant([[1, 1], [1]])


@settings(max_examples=200, deadline=None)
@given(pm_matrices)
def test_determinant_matches_rational_elimination(rows):
    assert exact_determinant(rows) == fraction_det(rows) == cofactor_det(rows)


@settings(max_examples=100, deadline=None)
@given(pm_matrices, st.randoms(use_true_random=False))
def test_abs_det_invariant_under_row_permutation_and_negation(rows, rnd):
    base = abs(exact_determinant(rows))
    perm = list(rows)
    rnd.shuffle(perm)
    perm = [[-v for v in r] if rnd.random() < 0.5 else r for r in perm]
    assert abs(exact_determinant(perm)) == base
    n = len(rows)
    # Hadamard's inequality, squared to stay in integers
    assert base * base <= n**n


def test_n29_normalizer_value():
    assert HADAMARD_29_BEST_DET == 2**28 * 7**12 * 320
    assert hadamard_score(HADAMARD_29_BEST_DET, 29) == 1.0
    assert hadamard_score(HADAMARD_29_BEST_DET // 2, 29) == 0.5


def test_n29_determinant_exceeds_int64_and_stays_exact():
    rng = np.random.default_rng(7)
    rows = rng.choice([-1, 1], size=(29, 29)).tolist()
    det = exact_determinant(rows)
    assert det == fraction_det(rows)
    ev = evaluate_hadamard(HadamardMatrix.from_rows(rows))
    assert ev.score == float(Fraction(abs(det), HADAMARD_29_BEST_DET))
    assert 0 <= ev.score <= 1


def test_custom_normalizer():
    m = HadamardMatrix.from_rows([[1, 1], [1, -1]])
    assert evaluate_hadamard(m, normalizer=4).score == 0.5


# -- autocorrelation ---------------------------------------------------------


def test_uniform_four_steps_hand_values():
    g = autoconvolution_nodes([1, 1, 1, 1])
    assert g.tolist() == [0, 0.5, 1, 1.5, 2, 1.5, 1, 0.5, 0]
    l2, l1, linf = autocorr_norms([1, 1, 1, 1])
    assert (linf, l1) == (2.0, 4.0)
    assert l2 == pytest.approx(16 / 3, abs=1e-14)
    assert evaluate_autocorr(StepFunction.from_values([1, 1, 1, 1])).score == pytest.approx(2 / 3, abs=1e-15)


def test_single_box_is_two_thirds():
    assert evaluate_autocorr(StepFunction.from_values([1, 0, 0, 0])).score == pytest.approx(2 / 3, abs=1e-15)


def test_subnormal_input_does_not_underflow():
    assert evaluate_autocorr(StepFunction.from_values([5e-324])).score == pytest.approx(2 / 3, abs=1e-15)


def test_all_zero_is_degenerate():
    with pytest.raises(DegenerateInputError):
        evaluate_autocorr(StepFunction(3, (0.0, 0.0, 0.0)))


@settings(max_examples=150, deadline=None)
@given(step_values)
def test_ratio_matches_exact_rational_oracle(values):
    ours = evaluate_autocorr(StepFunction.from_values(values)).score
    assert ours == pytest.approx(float(autocorr_ratio_exact(values)), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ratio_matches_dense_numerical_convolution(seed):
    values = np.random.default_rng(seed).exponential(size=12).tolist()
    ours = evaluate_autocorr(StepFunction.from_values(values)).score
    assert ours == pytest.approx(autocorr_ratio_numeric(values), abs=2e-3)


@settings(max_examples=150, deadline=None)
@given(step_values, st.floats(1e-3, 1e3))
def test_ratio_bounds_scale_and_reflection(values, c):
    r = evaluate_autocorr(StepFunction.from_values(values)).score
    assert 0 < r <= 1 + 1e-15
    assert evaluate_autocorr(StepFunction.from_values([c * v for v in values])).score == pytest.approx(r, abs=1e-12)
    assert evaluate_autocorr(StepFunction.from_values(values[::-1])).score == pytest.approx(r, abs=1e-12)


# -- circles -----------------------------------------------------------------


def test_inscribed_circle():
    ev = evaluate_circles(CirclePacking.from_tuples([(0.5, 0.5, 0.5)]), "exact")
    assert ev.valid and ev.score == 0.5 and ev.detail["min_gap"] == 0.0


def test_overlap_is_invalid_and_named():
    ev = evaluate_circles(CirclePacking.from_tuples([(0.5, 0.5, 0.3), (0.6, 0.5, 0.3)]), "exact")
    assert not ev.valid and ev.score == 0.0
    assert ev.violation.startswith("circles 0 and 1 overlap")


def test_first_failing_pair_is_reported():
    ev = evaluate_circles(CirclePacking.from_tuples([(0.25, 0.5, 0.2), (0.5, 0.5, 0.1), (0.75, 0.5, 0.2)]))
    assert ev.violation.startswith("circles 0 and 1 overlap")
    assert ev.detail["min_gap"] == pytest.approx(-0.05)


def test_tiny_overlap_splits_exact_and_relaxed():
    r = 0.2
    d = 2 * r - 5e-7
    packing = CirclePacking.from_tuples([(0.3, 0.5, r), (0.3 + d, 0.5, r)])
    exact, relaxed = evaluate_circles(packing, "exact"), evaluate_circles(packing, "relaxed")
    assert relaxed.valid and relaxed.score == pytest.approx(0.4)
    assert not exact.valid and exact.score == 0.0
    assert exact.detail["min_gap"] == pytest.approx(-5e-7, rel=1e-6)


def test_unknown_mode():
    with pytest.raises(ValueError):
        evaluate_circles(CirclePacking.from_tuples([(0.5, 0.5, 0.1)]), "loose")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.3)), min_size=1, max_size=8))
def test_circle_validity_matches_oracle(circles):
    p = CirclePacking.from_tuples(circles)
    for mode, slack in (("exact", 0.0), ("relaxed", 1e-6)):
        ev = evaluate_circles(p, mode)
        assert ev.valid == circle_valid(circles, slack)
        assert ev.score == (math.fsum(c[2] for c in circles) if ev.valid else 0.0)
    if evaluate_circles(p, "exact").valid:
        assert evaluate_circles(p, "relaxed").valid


def test_evaluators_are_pure():
    p = CirclePacking.from_tuples([(0.2, 0.2, 0.1), (0.7, 0.7, 0.2)])
    assert evaluate(p).to_json() == evaluate(p).to_json()


# -- seeds and sizes ---------------------------------------------------------


@pytest.mark.parametrize("task", ["hadamard", "autocorr", "circle_packing"])
@pytest.mark.parametrize("size", [2, 5, 29])
def test_seed_solutions_are_valid_and_positive(task, size):
    p = seed_solution(task, size)
    ev = evaluate(p)
    assert ev.valid and ev.score > 0
    assert check_size(p, size) is None


def test_size_checks():
    assert check_size(seed_solution("hadamard", 4), 5)
    assert check_size(seed_solution("autocorr", 4), 5)
    assert check_size(CirclePacking.from_tuples([(0.5, 0.5, 0.1)] * 3), 2)
    assert check_size(CirclePacking.from_tuples([(0.5, 0.5, 0.1)] * 2), 2) is None
