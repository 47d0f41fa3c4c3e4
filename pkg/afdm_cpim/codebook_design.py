"""Max-min codebook design over permuted DAFT matrices.

Pairwise distances only depend on the permuted second chirps: since F_N and
Lambda_{c1} are unitary, tr(A_i^H A_j) = <lambda_{c2,i}, lambda_{c2,j}> and
||A_i - A_j||_F^2 = 2N - 2 Re tr(A_i^H A_j).
"""

import csv
import itertools
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import StrEnum
from pathlib import Path

import numpy as np

from afdm_cpim.afdm import ChirpParams, DaftMatrix, PermutationIndex, daft_matrix, index_from_permutation
from afdm_cpim.channel import ChannelMatrix, effective_channel
from afdm_cpim.codec import Codebook
from afdm_cpim.errors import BudgetExceededError, InvalidDimensionError
from afdm_cpim.gas import GasConfig, GasTrace, gas_minimize
from afdm_cpim.objective import PolynomialBinaryObjective
from afdm_cpim.settings import settings

logger = logging.getLogger(__name__)

ANGULAR_CEILING = 1e12
TRACE_FLOOR = 1e-12
RESCALE_EPS = 0.1
RESCALE_MAX = 2.0
DEFAULT_LAMBDA1 = 20.0
_SUBSET_CHUNK = 1 << 16


class DistanceMetric(StrEnum):
    FROBENIUS = "frobenius"
    ANGULAR = "angular"


class DesignMethod(StrEnum):
    EXHAUSTIVE = "exhaustive"
    GAS = "gas"
    GREEDY = "greedy"
    AUTO = "auto"


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    pool: tuple[PermutationIndex, ...]
    metric: DistanceMetric
    d: np.ndarray
    rescaled: bool = False

    @property
    def size(self) -> int:
        return len(self.pool)

    def off_diagonal(self) -> np.ndarray:
        return self.d[~np.eye(self.size, dtype=bool)]


@dataclass(frozen=True)
class Selection:
    positions: tuple[int, ...]
    entries: tuple[PermutationIndex, ...]
    d_min: float = math.inf

    @property
    def size(self) -> int:
        return len(self.positions)


def sample_pool(n: int, size: int, rng: np.random.Generator) -> tuple[PermutationIndex, ...]:
    """All N! indices when they fit, otherwise ``size`` distinct uniform draws."""
    total = math.factorial(n)
    if total <= size:
        return tuple(PermutationIndex(i, n) for i in range(1, total + 1))
    chosen: set[int] = set()
    while len(chosen) < size:
        chosen.add(index_from_permutation(rng.permutation(n)).index)
    return tuple(PermutationIndex(i, n) for i in sorted(chosen))


def pairwise_distances(
    pool: Sequence[PermutationIndex], params: ChirpParams, metric: DistanceMetric | str
) -> DistanceMatrix:
    metric = DistanceMetric(metric)
    pool = tuple(pool)
    if len(set(pool)) != len(pool):
        raise ValueError("pool entries must be distinct")
    if any(p.order != params.n_subcarriers for p in pool):
        raise InvalidDimensionError(f"pool mixes permutation orders other than N={params.n_subcarriers}")

    chirps = np.stack([daft_matrix(params, p).lambda_c2 for p in pool])
    traces = chirps.conj() @ chirps.T
    if metric is DistanceMetric.FROBENIUS:
        d = np.sqrt(np.maximum(2.0 * params.n_subcarriers - 2.0 * traces.real, 0.0))
    else:
        magnitude = np.abs(traces)
        with np.errstate(divide="ignore"):
            d = np.where(magnitude < TRACE_FLOOR, ANGULAR_CEILING, 1.0 / magnitude)
    d = np.triu(d, 1)
    return DistanceMatrix(pool=pool, metric=metric, d=d + d.T)


def rescale_distances(
    distances: DistanceMatrix, eps: float = RESCALE_EPS, d_max: float = RESCALE_MAX
) -> DistanceMatrix:
    """Affine map of the off-diagonal entries onto [1 + eps, d_max].

    Angular ceiling entries are first clipped to the largest finite distance,
    otherwise a single orthogonal pair would squash every other distance onto
    1 + eps. The map stays non-decreasing, so the max-min optimiser is unchanged.

    Args:
        distances: Raw pairwise distances.
        eps: Gap kept above 1 so that every weight d^{-lambda1} stays below 1.
        d_max: Image of the largest distance.

    Returns:
        A copy with ``rescaled=True`` and a zero diagonal.
    """
    d = distances.d.copy()
    ceiling = d >= ANGULAR_CEILING
    if ceiling.any():
        finite = distances.off_diagonal()
        finite = finite[finite < ANGULAR_CEILING]
        if finite.size:
            d[ceiling] = finite.max()
    off = d[~np.eye(distances.size, dtype=bool)]
    lo, hi = (off.min(), off.max()) if off.size else (0.0, 0.0)
    if hi > lo:
        d = 1.0 + eps + (d - lo) / (hi - lo) * (d_max - 1.0 - eps)
    else:
        d = np.full_like(distances.d, 1.0 + eps)
    np.fill_diagonal(d, 0.0)
    return replace(distances, d=d, rescaled=True)


def subset_min_distance(d: np.ndarray, positions: Iterable[int]) -> float:
    pos = list(positions)
    if len(pos) < 2:
        return math.inf
    return float(min(d[i, j] for i, j in itertools.combinations(pos, 2)))


def _selection(distances: DistanceMatrix, positions: Iterable[int]) -> Selection:
    pos = tuple(sorted(int(p) for p in positions))
    return Selection(
        positions=pos,
        entries=tuple(distances.pool[p] for p in pos),
        d_min=subset_min_distance(distances.d, pos),
    )


def exhaustive_maxmin(
    distances: DistanceMatrix, k: int, *, budget: int | None = None
) -> Selection:
    """Exact max-min subset; ties go to the lexicographically smallest positions."""
    size = distances.size
    if not 1 <= k <= size:
        raise ValueError(f"cannot choose {k} codewords from a pool of {size}")
    budget = settings.SUBSET_BUDGET if budget is None else budget
    subsets = math.comb(size, k)
    if subsets > budget:
        raise BudgetExceededError(
            f"exhaustive max-min needs C({size}, {k}) = {subsets} subsets, above the budget "
            f"of {budget}; use the gas or greedy design method or a smaller pool"
        )
    if k == 1:
        return _selection(distances, (0,))

    pairs = list(itertools.combinations(range(k), 2))
    combos = itertools.combinations(range(size), k)
    best_value, best = -math.inf, None
    while chunk := list(itertools.islice(combos, _SUBSET_CHUNK)):
        subsets_arr = np.asarray(chunk, dtype=np.int64)
        mins = np.full(len(chunk), np.inf)
        for a, b in pairs:
            mins = np.minimum(mins, distances.d[subsets_arr[:, a], subsets_arr[:, b]])
        j = int(np.argmax(mins))
        if mins[j] > best_value:
            best_value, best = mins[j], chunk[j]
    return _selection(distances, best)


def greedy_maxmin(distances: DistanceMatrix, k: int) -> Selection:
    """Farthest-point heuristic seeded with the most distant pair."""
    size = distances.size
    if not 1 <= k <= size:
        raise ValueError(f"cannot choose {k} codewords from a pool of {size}")
    if k == 1:
        return _selection(distances, (0,))
    upper = np.triu(distances.d, 1)
    i, j = np.unravel_index(int(np.argmax(upper)), upper.shape)
    chosen = [int(i), int(j)]
    while len(chosen) < k:
        gaps = distances.d[:, chosen].min(axis=1)
        gaps[chosen] = -np.inf
        chosen.append(int(np.argmax(gaps)))
    return _selection(distances, chosen)


@dataclass(frozen=True, eq=False)
class CodebookDesignProblem:
    distances: DistanceMatrix
    k: int
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float | None = None

    def __post_init__(self) -> None:
        if np.any(self.distances.off_diagonal() <= 1.0):
            raise ValueError("design distances must exceed 1; apply rescale_distances first")
        if self.lambda1 < 1:
            raise ValueError(f"lambda1 must be >= 1, got {self.lambda1}")
        if self.lambda2 is not None and self.lambda2 <= 0:
            raise ValueError(f"lambda2 must be > 0, got {self.lambda2}")

    @property
    def weights(self) -> np.ndarray:
        w = np.zeros_like(self.distances.d)
        off = ~np.eye(self.distances.size, dtype=bool)
        w[off] = (1.0 / self.distances.d[off]) ** self.lambda1
        return w

    @property
    def penalty(self) -> float:
        if self.lambda2 is not None:
            return self.lambda2
        return 10.0 * float(self.weights.max())


def build_codebook_objective(problem: CodebookDesignProblem) -> PolynomialBinaryObjective:
    """E(b) = sum_{i<j} b_i b_j d_ij^{-lambda1} + lambda2 (sum_i b_i - K)^2.

    With b_i^2 = b_i the penalty expands to
    lambda2 [(1 - 2K) sum_i b_i + 2 sum_{i<j} b_i b_j + K^2].
    """
    n = problem.distances.size
    w = problem.weights
    lam2 = problem.penalty
    k = problem.k
    obj = PolynomialBinaryObjective(
        n, constant=lam2 * k * k, metadata={"kind": "codebook", "k": k, "lambda2": lam2}
    )
    for i in range(n):
        obj.add_term((i,), lam2 * (1 - 2 * k))
    for i, j in itertools.combinations(range(n), 2):
        obj.add_term((i, j), w[i, j] + 2.0 * lam2)
    return obj


def decode_selection(b, pool: Sequence[PermutationIndex]) -> tuple[PermutationIndex, ...]:
    bits = np.asarray(b, dtype=np.uint8).ravel()
    if bits.size != len(pool):
        raise InvalidDimensionError(f"{bits.size} selection bits for a pool of {len(pool)}")
    return tuple(pool[i] for i in np.flatnonzero(bits))


def sufficient_lambda1(distances: DistanceMatrix, k: int) -> float:
    """Smallest lambda1 for which the objective's minimum attains the best d_min.

    With d1 the optimal d_min and d2 the next smaller distance, every other
    codebook scores at least d2^{-lambda1}, while the optimum scores at most
    C(K, 2) d1^{-lambda1}.
    """
    d1 = exhaustive_maxmin(distances, k).d_min
    off = distances.off_diagonal()
    # values within rounding of d1 count as ties of the optimum
    below = off[off < d1 * (1.0 - 1e-9)]
    if below.size == 0 or not math.isfinite(d1):
        return 1.0
    d2 = float(below.max())
    return max(1.0, math.log(max(math.comb(k, 2), 1)) / math.log(d1 / d2))


@dataclass(frozen=True, eq=False)
class DesignResult:
    method: DesignMethod
    selection: Selection
    distances: DistanceMatrix
    rescaled: DistanceMatrix
    trace: GasTrace | None = None

    @property
    def d_min(self) -> float:
        return self.selection.d_min

    @property
    def d_min_rescaled(self) -> float:
        return subset_min_distance(self.rescaled.d, self.selection.positions)

    def codebook(self, params: ChirpParams) -> Codebook:
        return Codebook(params, self.selection.entries)


def design_codebook(
    pool: Sequence[PermutationIndex],
    params: ChirpParams,
    k: int,
    *,
    metric: DistanceMetric | str = DistanceMetric.ANGULAR,
    method: DesignMethod | str = DesignMethod.AUTO,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float | None = None,
    gas_config: GasConfig | None = None,
    budget: int | None = None,
) -> DesignResult:
    """
    Choose K codewords from a pool maximising the minimum pairwise distance.

    Args:
        pool: Candidate permutation indices, all of order N
        params: Chirp parameters shared by every codeword
        k: Codebook size
        metric: ``frobenius`` or ``angular``
        method: ``exhaustive``, ``greedy``, ``gas``, or ``auto`` (exhaustive
            within the subset budget, greedy beyond it)
        lambda1: Exponent of the pair weights d^{-lambda1} in the GAS objective
        lambda2: Cardinality penalty; 10 * max weight when None
        gas_config: Settings of the ``gas`` method
        budget: Subset budget of the exhaustive search; settings default when None

    Returns:
        DesignResult with the selection, raw and rescaled distances and the
        GAS trace when GAS ran. A GAS selection of the wrong size is returned
        as is and logged as a warning.
    """
    method = DesignMethod(method)
    raw = pairwise_distances(pool, params, metric)
    scaled = rescale_distances(raw)
    budget = settings.SUBSET_BUDGET if budget is None else budget
    if method is DesignMethod.AUTO:
        method = (
            DesignMethod.EXHAUSTIVE
            if math.comb(raw.size, k) <= budget
            else DesignMethod.GREEDY
        )

    trace = None
    match method:
        case DesignMethod.EXHAUSTIVE:
            positions = exhaustive_maxmin(raw, k, budget=budget).positions
        case DesignMethod.GREEDY:
            positions = greedy_maxmin(raw, k).positions
        case DesignMethod.GAS:
            problem = CodebookDesignProblem(scaled, k, lambda1=lambda1, lambda2=lambda2)
            trace = gas_minimize(build_codebook_objective(problem), gas_config or GasConfig())
            positions = tuple(int(i) for i in np.flatnonzero(trace.best_b))
            if len(positions) != k:
                logger.warning(
                    "GAS selected %d codewords instead of %d; raise lambda2 or max_iterations",
                    len(positions),
                    k,
                )

    result = DesignResult(
        method=method,
        selection=_selection(raw, positions),
        distances=raw,
        rescaled=scaled,
        trace=trace,
    )
    logger.info(
        "designed %s codebook (%s, K=%d, pool=%d): d_min=%.6g",
        raw.metric,
        method,
        k,
        raw.size,
        result.d_min,
    )
    return result


def effective_channel_distance(
    daft_i: DaftMatrix, daft_j: DaftMatrix, channels: Iterable[ChannelMatrix]
) -> float:
    """Mean ||G_i - G_j||_F over channel realizations (optional design metric)."""
    gaps = [
        np.linalg.norm(effective_channel(h, daft_i).g - effective_channel(h, daft_j).g)
        for h in channels
    ]
    if not gaps:
        raise ValueError("need at least one channel realization")
    return float(np.mean(gaps))


def write_distance_csv(path: Path, distances: DistanceMatrix) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "distance"])
        for i in range(distances.size):
            for j in range(distances.size):
                writer.writerow([i, j, repr(float(distances.d[i, j]))])
