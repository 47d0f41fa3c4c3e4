"""Grover Adaptive Search, emulated at the amplitude-amplification level.

No state vector is simulated. A measurement after L Grover rotations on a
threshold oracle with good fraction g returns a good state with probability
sin^2((2L + 1) arcsin(sqrt(g))), uniformly within the good set, and a uniform
bad state otherwise. That is exactly the measurement law of the circuit, so the
search dynamics are preserved.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from afdm_cpim.afdm import DaftMatrix, modulate
from afdm_cpim.channel import ChannelMatrix, as_dense
from afdm_cpim.codec import Codebook, Constellation
from afdm_cpim.objective import (
    EnergyLandscape,
    PolynomialBinaryObjective,
    states_to_bits,
)

logger = logging.getLogger(__name__)


class GasConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scaling_lambda: float = Field(8 / 7, gt=1, description="Growth factor of the rotation bound")
    max_iterations: int = Field(2000, gt=0)
    no_improve_limit: int | None = Field(
        None, gt=0, description="Consecutive non-improving samples; default 8 * sqrt(2^n)"
    )
    seed: int = Field(0, ge=0)
    fixed_point_bits: int | None = Field(None, ge=0, description="Fractional bits m of the value register")
    register_bits: int | None = Field(None, gt=1, description="Register width for wraparound")


class GasStep(NamedTuple):
    iteration: int
    threshold: float
    rotations: int
    value: float


@dataclass
class GasTrace:
    history: list[GasStep] = field(default_factory=list)
    best_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    best_y: float = math.inf
    oracle_queries: int = 0
    total_rotations: int = 0
    stop_reason: str = ""


def _good_probability(good: int, size: int, rotations: int) -> float:
    theta = math.asin(math.sqrt(good / size))
    return math.sin((2 * rotations + 1) * theta) ** 2


def _sample_states(
    land: EnergyLandscape, y: float, rotations: int, rng: np.random.Generator, count: int
) -> np.ndarray:
    size = land.size
    good = land.count_below(y)
    if good == 0 or good == size:
        # nothing to amplify: every draw is uniform
        return land.order[rng.integers(0, size, count)]
    p = _good_probability(good, size, rotations)
    hit = rng.random(count) < p
    ranks = np.where(
        hit, rng.integers(0, good, count), rng.integers(good, size, count)
    )
    return land.order[ranks]


def grover_sample(
    obj: PolynomialBinaryObjective,
    y: float,
    rotations: int,
    rng: np.random.Generator,
    *,
    size: int | None = None,
    landscape: EnergyLandscape | None = None,
) -> np.ndarray:
    """
    Measure R^L S_y |0> on the threshold oracle E(b) < y.

    Args:
        obj: Objective defining the oracle
        y: Threshold; states strictly below it are good
        rotations: Number L of Grover rotations, >= 0
        rng: Measurement generator
        size: Number of independent measurements; None for a single one
        landscape: Precomputed energy landscape of ``obj`` to reuse

    Returns:
        One bit vector, or ``size`` of them stacked row-wise
    """
    if rotations < 0:
        raise ValueError(f"rotation count must be >= 0, got {rotations}")
    land = landscape if landscape is not None else obj.landscape()
    states = _sample_states(land, y, rotations, rng, 1 if size is None else size)
    bits = states_to_bits(states, obj.n_vars)
    return bits[0] if size is None else bits


def gas_minimize(
    obj: PolynomialBinaryObjective,
    config: GasConfig,
    rng: np.random.Generator | None = None,
) -> GasTrace:
    """
    Minimise a binary objective with emulated Grover Adaptive Search.

    Each iteration draws a rotation count L uniformly from {0..ceil(k) - 1},
    measures once against the current threshold and adopts the sample when
    it improves on it. k resets to 1 on success and otherwise grows by
    ``scaling_lambda`` up to sqrt(2^n).

    Args:
        obj: Objective over n binary variables, n within the emulation budget
        config: Growth factor, iteration cap, no-improve limit and register format
        rng: Generator for the initial state and all measurements; seeded from
            ``config.seed`` when omitted

    Returns:
        GasTrace with the per-iteration history, the best bits and value, and
        the oracle query and rotation counts

    Raises:
        BudgetExceededError: The objective has more variables than
            ``EMULATION_MAX_VARS``
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    land = obj.landscape(config.fixed_point_bits, config.register_bits)
    space = land.size
    k_cap = math.sqrt(space)
    limit = config.no_improve_limit or math.ceil(8 * math.sqrt(space))

    state = int(rng.integers(space))
    y = float(land.energies[state])
    k = 1.0
    stall = 0
    trace = GasTrace()
    trace.stop_reason = "max_iterations"

    for i in range(1, config.max_iterations + 1):
        rotations = int(rng.integers(0, math.ceil(k - 1) + 1))
        candidate = int(_sample_states(land, y, rotations, rng, 1)[0])
        value = float(land.energies[candidate])
        trace.oracle_queries += 1
        trace.total_rotations += rotations
        trace.history.append(GasStep(i, y, rotations, value))
        if value < y:
            state, y = candidate, value
            k = 1.0
            stall = 0
        else:
            k = min(config.scaling_lambda * k, k_cap)
            stall += 1
            if stall >= limit:
                trace.stop_reason = "no_improve_limit"
                break

    trace.best_b = states_to_bits(np.asarray([state]), obj.n_vars)[0]
    trace.best_y = obj.evaluate(trace.best_b)
    logger.debug(
        "GAS stopped (%s) after %d queries, %d rotations, best %.6g",
        trace.stop_reason,
        trace.oracle_queries,
        trace.total_rotations,
        trace.best_y,
    )
    return trace


def write_trace_csv(path: Path, trace: GasTrace) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "y", "L", "value", "cumulative_queries"])
        for n, step in enumerate(trace.history, start=1):
            writer.writerow([step.iteration, repr(step.threshold), step.rotations, repr(step.value), n])


def build_ml_objective(
    r: np.ndarray,
    h: ChannelMatrix,
    daft: DaftMatrix,
    constellation: Constellation,
) -> PolynomialBinaryObjective:
    """E(b) = ||r - H A_k^{-1} g(b)||^2 expanded into multilinear terms.

    g(b) is the constellation's bit polynomial per symbol, so BPSK/QPSK give a
    quadratic objective and 16-QAM one of degree four.
    """
    n = daft.n
    width = constellation.bits_per_symbol
    phi = as_dense(h) @ modulate(np.eye(n), daft)

    offset = constellation.terms.get((), 0.0)
    c = np.asarray(r, dtype=np.complex128) - phi @ np.full(n, offset)

    monomials: list[tuple[int, ...]] = []
    columns: list[np.ndarray] = []
    for t in range(n):
        for subset, coef in constellation.terms.items():
            if subset:
                monomials.append(tuple(t * width + j for j in subset))
                columns.append(phi[:, t] * coef)
    w = np.stack(columns, axis=1)
    gram = (w.conj().T @ w).real
    lin = -2.0 * (w.conj().T @ c).real

    obj = PolynomialBinaryObjective(
        n * width,
        constant=float(np.vdot(c, c).real),
        metadata={"kind": "ml", "perm_index": daft.perm.index},
    )
    for s, vars_s in enumerate(monomials):
        obj.add_term(vars_s, lin[s])
        for t, vars_t in enumerate(monomials):
            obj.add_term(vars_s + vars_t, gram[s, t])
    return obj


@dataclass
class MlSolution:
    bits: np.ndarray
    k: int
    value: float
    traces: list[GasTrace]

    @property
    def oracle_queries(self) -> int:
        return sum(t.oracle_queries for t in self.traces)


def device_rng(seed: int, k: int) -> np.random.Generator:
    """Stream of device k, independent of how devices are scheduled."""
    return np.random.default_rng(np.random.SeedSequence([seed, k]))


def parallel_ml_solve(
    r: np.ndarray,
    h: ChannelMatrix,
    codebook: Codebook,
    constellation: Constellation,
    config: GasConfig,
    *,
    jobs: int = 1,
) -> MlSolution:
    """
    Joint ML detection with one GAS run per codeword.

    Device k minimises ||r - H A_k^{-1} g(b)||^2 on its own stream
    ``device_rng(config.seed, k)``; the device with the smallest objective
    wins, ties going to the smaller k.

    Args:
        r: Received vector
        h: Channel matrix
        codebook: Codebook of K permuted DAFT matrices
        constellation: Symbol alphabet
        config: GAS settings shared by all devices
        jobs: Worker threads; results do not depend on it

    Returns:
        MlSolution with the winning bits, index and value and every device trace
    """

    def solve(k: int) -> tuple[GasTrace, float]:
        obj = build_ml_objective(r, h, codebook.daft(k), constellation)
        trace = gas_minimize(obj, config, rng=device_rng(config.seed, k))
        return trace, trace.best_y

    ks = range(1, codebook.size + 1)
    if jobs > 1 and codebook.size > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(solve, ks))
    else:
        results = [solve(k) for k in ks]

    best_k = min(ks, key=lambda k: (results[k - 1][1], k))
    trace, value = results[best_k - 1]
    return MlSolution(
        bits=trace.best_b, k=best_k, value=value, traces=[t for t, _ in results]
    )

