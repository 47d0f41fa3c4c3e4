import csv
import itertools
import math
from pathlib import Path

import numpy as np
import pytest

from afdm_cpim.afdm import ChirpParams, PermutationIndex, daft_matrix
from afdm_cpim.channel import channel_matrix, sample_channel
from afdm_cpim.codebook_design import (
    CodebookDesignProblem,
    DesignMethod,
    DistanceMatrix,
    DistanceMetric,
    build_codebook_objective,
    decode_selection,
    design_codebook,
    effective_channel_distance,
    exhaustive_maxmin,
    greedy_maxmin,
    pairwise_distances,
    rescale_distances,
    sample_pool,
    subset_min_distance,
    sufficient_lambda1,
    write_distance_csv,
)
from afdm_cpim.errors import BudgetExceededError, InvalidDimensionError
from afdm_cpim.gas import GasConfig, gas_minimize
from afdm_cpim.objective import states_to_bits

FULL_POOL = tuple(PermutationIndex(i, 4) for i in range(1, 25))


@pytest.fixture(params=list(DistanceMetric))
def distances(request, params4):
    return pairwise_distances(FULL_POOL, params4, request.param)


def _two_hot(n: int, i: int, j: int) -> np.ndarray:
    b = np.zeros(n, dtype=np.uint8)
    b[[i, j]] = 1
    return b


def test_matrix_shape_and_symmetry(distances) -> None:
    assert distances.d.shape == (24, 24)
    np.testing.assert_array_equal(np.diag(distances.d), np.zeros(24))
    np.testing.assert_array_equal(distances.d, distances.d.T)
    assert np.all(distances.d >= 0)


def test_distances_match_dense_definitions(params4) -> None:
    frob = pairwise_distances(FULL_POOL, params4, "frobenius")
    ang = pairwise_distances(FULL_POOL, params4, "angular")
    dafts = [daft_matrix(params4, p) for p in FULL_POOL]
    for i, j in itertools.combinations(range(24), 2):
        a_i, a_j = dafts[i].forward, dafts[j].forward
        assert frob.d[i, j] == pytest.approx(np.linalg.norm(a_i - a_j), abs=1e-9)
        assert frob.d[i, j] > 0
        trace = np.trace(a_i.conj().T @ a_j)
        assert ang.d[i, j] == pytest.approx(1 / abs(trace), rel=1e-9)
        # a global phase on A_j leaves the angular distance unchanged
        rotated = np.trace(a_i.conj().T @ (np.exp(0.7j) * a_j))
        assert ang.d[i, j] == pytest.approx(1 / abs(rotated), rel=1e-9)


def test_orthogonal_codewords_hit_the_ceiling() -> None:
    params = ChirpParams(n_subcarriers=2, c1=0.0, c2=0.25)
    d = pairwise_distances((PermutationIndex(1, 2), PermutationIndex(2, 2)), params, "angular")
    assert d.d[0, 1] == 1e12


def test_pool_validation(params4) -> None:
    with pytest.raises(ValueError):
        pairwise_distances((FULL_POOL[0], FULL_POOL[0]), params4, "frobenius")
    with pytest.raises(InvalidDimensionError):
        pairwise_distances((FULL_POOL[0], PermutationIndex(1, 5)), params4, "frobenius")


def test_rescaling_is_monotone(distances) -> None:
    scaled = rescale_distances(distances)
    off = scaled.off_diagonal()
    assert off.min() == pytest.approx(1.1)
    assert off.max() == pytest.approx(2.0)
    assert scaled.rescaled
    mask = ~np.eye(24, dtype=bool)
    order = np.argsort(distances.d[mask], kind="stable")
    assert np.all(np.diff(scaled.d[mask][order]) >= -1e-12)
    for k in (2, 3):
        raw_best = exhaustive_maxmin(distances, k)
        assert subset_min_distance(scaled.d, raw_best.positions) == pytest.approx(
            exhaustive_maxmin(scaled, k).d_min
        )


def test_angular_ceiling_does_not_flatten_rescaling() -> None:
    raw = np.array([[0.0, 1.5, 3.0], [1.5, 0.0, 1e12], [3.0, 1e12, 0.0]])
    scaled = rescale_distances(DistanceMatrix(FULL_POOL[:3], DistanceMetric.ANGULAR, raw))
    assert scaled.d[0, 1] == pytest.approx(1.1)
    assert scaled.d[0, 2] == pytest.approx(2.0)
    assert scaled.d[1, 2] == pytest.approx(2.0)
    assert raw[1, 2] == 1e12

    orthogonal = np.array([[0.0, 1e12], [1e12, 0.0]])
    only = rescale_distances(DistanceMatrix(FULL_POOL[:2], DistanceMetric.ANGULAR, orthogonal))
    assert only.d[0, 1] == pytest.approx(1.1)


def test_exhaustive_pair_is_global_maximum(distances) -> None:
    best = exhaustive_maxmin(distances, 2)
    assert best.d_min == distances.d.max()
    i, j = best.positions
    assert distances.d[i, j] == distances.d.max()


def test_full_selection_gives_global_minimum(distances) -> None:
    assert exhaustive_maxmin(distances, 24).d_min == distances.off_diagonal().min()


@pytest.mark.parametrize("k", [2, 3])
def test_maxmin_dominance(distances, k: int) -> None:
    best = exhaustive_maxmin(distances, k)
    assert best.size == k
    for subset in itertools.combinations(range(24), k):
        assert best.d_min >= subset_min_distance(distances.d, subset)


def test_exhaustive_budget(distances) -> None:
    with pytest.raises(BudgetExceededError, match="budget"):
        exhaustive_maxmin(distances, 3, budget=100)


def test_greedy_never_beats_the_oracle(distances) -> None:
    for k in (2, 3, 4):
        greedy = greedy_maxmin(distances, k)
        assert greedy.size == k
        assert greedy.d_min <= exhaustive_maxmin(distances, k).d_min
    assert greedy_maxmin(distances, 2).d_min == exhaustive_maxmin(distances, 2).d_min


def test_objective_matches_formula(distances, rng) -> None:
    scaled = rescale_distances(distances)
    problem = CodebookDesignProblem(scaled, 2)
    obj = build_codebook_objective(problem)
    assert obj.degree == 2
    assert obj.evaluate(np.zeros(24)) == pytest.approx(problem.penalty * 4)

    w = problem.weights
    for _ in range(200):
        b = rng.integers(0, 2, 24)
        pairs = sum(w[i, j] for i, j in itertools.combinations(np.flatnonzero(b), 2))
        direct = pairs + problem.penalty * (b.sum() - 2) ** 2
        assert obj.evaluate(b) == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_default_penalty(distances) -> None:
    problem = CodebookDesignProblem(rescale_distances(distances), 2)
    assert problem.penalty == pytest.approx(10 * problem.weights.max())
    assert CodebookDesignProblem(rescale_distances(distances), 2, lambda2=3.0).penalty == 3.0


def test_problem_requires_rescaled_distances() -> None:
    close = DistanceMatrix(
        pool=FULL_POOL[:2], metric=DistanceMetric.ANGULAR, d=np.array([[0.0, 0.5], [0.5, 0.0]])
    )
    with pytest.raises(ValueError):
        CodebookDesignProblem(close, 2)
    with pytest.raises(ValueError):
        CodebookDesignProblem(rescale_distances(close), 2, lambda1=0.5)


def test_maxmin_pair_minimises_the_objective(distances) -> None:
    scaled = rescale_distances(distances)
    best = exhaustive_maxmin(scaled, 2)
    for lambda1 in (10.0, 20.0, 40.0):
        obj = build_codebook_objective(CodebookDesignProblem(scaled, 2, lambda1=lambda1))
        values = {
            (i, j): obj.evaluate(_two_hot(24, i, j)) for i, j in itertools.combinations(range(24), 2)
        }
        assert values[best.positions] == pytest.approx(min(values.values()))


def test_sufficient_lambda1_recovers_maxmin(params4) -> None:
    pool = FULL_POOL[:12]
    scaled = rescale_distances(pairwise_distances(pool, params4, "angular"))
    k = 3
    lambda1 = sufficient_lambda1(scaled, k) + 1.0
    obj = build_codebook_objective(CodebookDesignProblem(scaled, k, lambda1=lambda1))
    best = min(itertools.combinations(range(12), k), key=lambda s: obj.evaluate(np.isin(np.arange(12), s)))
    assert subset_min_distance(scaled.d, best) == pytest.approx(exhaustive_maxmin(scaled, k).d_min)


def test_decode_selection() -> None:
    assert decode_selection(np.eye(24, dtype=np.uint8)[5], FULL_POOL) == (FULL_POOL[5],)
    assert decode_selection(np.zeros(24), FULL_POOL) == ()
    with pytest.raises(InvalidDimensionError):
        decode_selection(np.zeros(3), FULL_POOL)


@pytest.mark.slow
@pytest.mark.parametrize("metric", list(DistanceMetric))
def test_gas_attains_the_maxmin_optimum(params4, metric) -> None:
    raw = pairwise_distances(FULL_POOL, params4, metric)
    oracle = exhaustive_maxmin(raw, 2)
    obj = build_codebook_objective(CodebookDesignProblem(rescale_distances(raw), 2))
    hits = 0
    for seed in range(100):
        trace = gas_minimize(obj, GasConfig(max_iterations=2000, seed=seed))
        chosen = decode_selection(trace.best_b, FULL_POOL)
        positions = [FULL_POOL.index(p) for p in chosen]
        hits += int(
            len(chosen) == 2
            and math.isclose(subset_min_distance(raw.d, positions), oracle.d_min, rel_tol=1e-9)
        )
    assert hits >= 95


def test_gas_design_on_a_small_pool(params4) -> None:
    pool = FULL_POOL[::3]
    result = design_codebook(pool, params4, 2, method="gas", gas_config=GasConfig(seed=0))
    oracle = exhaustive_maxmin(result.distances, 2)
    assert result.method is DesignMethod.GAS
    assert result.trace is not None
    assert result.selection.size == 2
    assert result.d_min == pytest.approx(oracle.d_min)


def test_auto_design_uses_the_oracle(params4) -> None:
    result = design_codebook(FULL_POOL, params4, 4, metric="frobenius")
    assert result.method is DesignMethod.EXHAUSTIVE
    assert result.d_min == exhaustive_maxmin(result.distances, 4).d_min
    codebook = result.codebook(params4)
    assert codebook.size == 4
    assert result.d_min_rescaled > 1.0

    fallback = design_codebook(FULL_POOL, params4, 4, budget=10)
    assert fallback.method is DesignMethod.GREEDY


def test_sample_pool(rng) -> None:
    assert sample_pool(4, 256, rng) == FULL_POOL
    pool = sample_pool(8, 50, rng)
    assert len(pool) == 50
    assert len(set(pool)) == 50
    assert list(pool) == sorted(pool)
    assert all(p.order == 8 for p in pool)
    assert sample_pool(8, 50, np.random.default_rng(3)) == sample_pool(8, 50, np.random.default_rng(3))


def test_effective_channel_distance(params8, rng) -> None:
    a = daft_matrix(params8, PermutationIndex(1, 8))
    b = daft_matrix(params8, PermutationIndex(40320, 8))
    channels = [channel_matrix(sample_channel(2, 1, 1.0, False, rng), params8.c1, 8) for _ in range(5)]
    assert effective_channel_distance(a, a, channels) == 0.0
    assert effective_channel_distance(a, b, channels) > 0.0
    assert effective_channel_distance(a, b, [np.eye(8)]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        effective_channel_distance(a, b, [])


def test_distance_csv(tmp_path: Path, distances) -> None:
    path = tmp_path / "distances.csv"
    write_distance_csv(path, distances)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row", "col", "distance"]
    assert len(rows) == 1 + 24 * 24
    assert float(rows[2][2]) == distances.d[0, 1]


def test_states_decode_into_selections() -> None:
    bits = states_to_bits(np.array([(1 << 23) | 1]), 24)[0]
    assert decode_selection(bits, FULL_POOL) == (FULL_POOL[0], FULL_POOL[23])
    assert math.comb(24, 2) == 276
