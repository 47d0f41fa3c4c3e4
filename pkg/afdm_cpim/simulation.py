"""Monte Carlo BER harness for AFDM-CPIM.

Every trial is fully determined by (seed, point index, trial index): its
generator is spawned from ``SeedSequence(seed, spawn_key=(point, trial))``
where point is the position of the Eb/N0 value in the sweep grid. Workers may
therefore run trials in any order, and early stopping is decided in trial
order.
"""

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from functools import partial
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from afdm_cpim.afdm import ChirpParams, PermutationIndex
from afdm_cpim.channel import apply_channel, channel_matrix, sample_channel
from afdm_cpim.codebook_design import DesignMethod, DistanceMetric, design_codebook, sample_pool
from afdm_cpim.codec import (
    Codebook,
    Constellation,
    decode_bits,
    encode,
    frame_bits,
    random_codebook,
)
from afdm_cpim.detectors import DetectionMethod, detect
from afdm_cpim.errors import BudgetExceededError, ConfigError, CpimError, SimulationError
from afdm_cpim.gas import GasConfig
from afdm_cpim.settings import settings

logger = logging.getLogger(__name__)

_CODEBOOK_STREAM = 0xC0DEB00C


class CodebookSource(StrEnum):
    DESIGNED = "designed"
    EXPLICIT = "explicit"
    RANDOM = "random"


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    N: int = Field(32, ge=2, description="Subcarriers per frame")
    M: int = Field(2, description="Constellation order (2, 4 or 16)")
    K: int = Field(1, ge=1, description="Codebook size, a power of two")
    P: int = Field(3, ge=1, description="Channel paths")
    ell_max: int = Field(3, ge=0)
    f_max: float = Field(3.0, ge=0)
    xi: int = Field(0, ge=0, description="Guard width of the first chirp")
    c2: float | None = Field(None, description="Second chirp frequency; default (sqrt(5) - 1) / (2N)")
    fractional_doppler: bool = False

    detector: DetectionMethod = DetectionMethod.MMSE_ML
    metric: DistanceMetric = DistanceMetric.ANGULAR
    codebook_source: CodebookSource = CodebookSource.DESIGNED
    codebook_indices: list[int] | None = None
    design_method: DesignMethod = DesignMethod.AUTO
    pool_size: int = Field(256, ge=2)

    ebn0_grid_db: list[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0])
    trials_per_point: int = Field(1000, gt=0)
    target_bit_errors: int | None = Field(200, gt=0)
    batch_size: int = Field(64, gt=0, description="Trials scheduled between early-stop checks")
    seed: int = Field(0, ge=0)

    channel_n0: float | None = Field(None, ge=0, description="Overrides the Eb/N0-derived channel noise")
    filter_n0: float | None = Field(None, ge=0, description="Overrides the MMSE filter noise (genie by default)")
    ml_candidate_budget: int | None = Field(None, gt=0)
    gas: GasConfig = Field(default_factory=GasConfig)
    include_reference: bool = False

    @model_validator(mode="after")
    def check_consistency(self) -> "SimConfig":
        if self.M not in (2, 4, 16):
            raise ValueError(f"M must be 2, 4 or 16, got {self.M}")
        if self.K & (self.K - 1):
            raise ValueError(f"K must be a power of two, got {self.K}")
        if self.K > math.factorial(self.N):
            raise ValueError(f"K={self.K} exceeds N! = {math.factorial(self.N)}")
        if self.ell_max >= self.N:
            raise ValueError(f"ell_max={self.ell_max} must be below N={self.N}")
        if self.P > self.ell_max + 1:
            raise ValueError(f"P={self.P} distinct delays do not fit in 0..{self.ell_max}")
        if not self.ebn0_grid_db:
            raise ValueError("ebn0_grid_db must not be empty")
        if self.codebook_source is CodebookSource.EXPLICIT:
            if not self.codebook_indices or len(self.codebook_indices) != self.K:
                raise ValueError("codebook_source='explicit' needs codebook_indices with K entries")
        return self

    @property
    def symbol_bits(self) -> int:
        return self.N * int(math.log2(self.M))

    @property
    def index_bits(self) -> int:
        return int(math.log2(self.K))

    @property
    def bits_per_frame(self) -> int:
        return frame_bits(self.N, self.M, self.K)


@dataclass(frozen=True)
class BerPoint:
    ebn0_db: float
    trials: int
    symbol_bit_errors: int
    index_bit_errors: int
    symbol_bits: int
    index_bits: int

    @property
    def total_bits(self) -> int:
        return self.symbol_bits + self.index_bits

    @property
    def ber_symbol(self) -> float:
        return self.symbol_bit_errors / self.symbol_bits if self.symbol_bits else 0.0

    @property
    def ber_index(self) -> float:
        return self.index_bit_errors / self.index_bits if self.index_bits else 0.0

    @property
    def ber_total(self) -> float:
        return (self.symbol_bit_errors + self.index_bit_errors) / self.total_bits


@dataclass(frozen=True, eq=False)
class Experiment:
    """Everything a trial needs that does not change between trials."""

    config: SimConfig
    params: ChirpParams
    constellation: Constellation
    codebook: Codebook


@dataclass
class SweepResult:
    points: list[BerPoint]
    metadata: dict[str, Any]
    reference: list[tuple[float, float]] | None = None
    experiment: Experiment | None = field(default=None, repr=False)


def noise_variance_from_ebn0(ebn0_db: float, n: int, m: int, k: int) -> float:
    """N0 for unit-energy symbols and B = N log2(M) + log2(K) bits per N samples."""
    eb = n / frame_bits(n, m, k)
    return eb / 10.0 ** (ebn0_db / 10.0)


def theoretical_gain_db(n: int, m: int, k: int) -> float:
    """10 log10(1 + log2(K) / (N log2(M))); K may be any positive integer, e.g. 32!."""
    return 10.0 * math.log10(1.0 + math.log2(k) / (n * math.log2(m)))


def trial_seed(seed: int, point: int, trial: int) -> np.random.SeedSequence:
    """Counter-based stream of one trial.

    Args:
        seed: Master seed of the sweep.
        point: Index of the Eb/N0 value in ``ebn0_grid_db``.
        trial: Trial index within the point.

    Returns:
        A ``SeedSequence`` that depends on nothing else, so trials can run in
        any order on any worker.
    """
    if point < 0 or trial < 0:
        raise ValueError(f"point and trial indices must be >= 0, got ({point}, {trial})")
    return np.random.SeedSequence(seed, spawn_key=(point, trial))


def build_codebook(config: SimConfig) -> Codebook:
    params = ChirpParams.optimal(config.N, config.f_max, config.xi, config.c2)
    if config.K == 1:
        return Codebook(params, (PermutationIndex.identity(config.N),))
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_CODEBOOK_STREAM,)))
    match config.codebook_source:
        case CodebookSource.EXPLICIT:
            return Codebook.from_indices(params, config.codebook_indices)
        case CodebookSource.RANDOM:
            return random_codebook(params, config.K, rng)
        case CodebookSource.DESIGNED:
            pool = sample_pool(config.N, config.pool_size, rng)
            result = design_codebook(
                pool,
                params,
                config.K,
                metric=config.metric,
                method=config.design_method,
                gas_config=config.gas,
            )
            if result.selection.size != config.K:
                raise SimulationError(
                    f"codebook design returned {result.selection.size} codewords instead of "
                    f"K={config.K}; use design_method='exhaustive' or 'greedy'"
                )
            return result.codebook(params)


def prepare_experiment(config: SimConfig) -> Experiment:
    """Validate detector budgets and build the codebook shared by all trials.

    Args:
        config: Sweep configuration.

    Returns:
        The trial-invariant part of the experiment.

    Raises:
        BudgetExceededError: ``full_ml`` would enumerate more than the
            candidate budget, or ``gas`` would emulate more binary variables
            than ``EMULATION_MAX_VARS``.
    """
    budget = config.ml_candidate_budget or settings.ML_CANDIDATE_BUDGET
    if config.detector is DetectionMethod.FULL_ML and config.K * config.M**config.N > budget:
        raise BudgetExceededError(
            f"full_ml needs K*M^N = {config.K * config.M**config.N} candidates per frame, above "
            f"the budget of {budget}; use detector='mmse_ml' or 'gas'"
        )
    if config.detector is DetectionMethod.GAS and config.symbol_bits > settings.EMULATION_MAX_VARS:
        raise BudgetExceededError(
            f"gas needs N*log2(M) = {config.symbol_bits} binary variables per device, above the "
            f"emulation budget of {settings.EMULATION_MAX_VARS}; use detector='mmse_ml' or a smaller N"
        )
    codebook = build_codebook(config)
    return Experiment(
        config=config,
        params=codebook.params,
        constellation=Constellation.from_order(config.M),
        codebook=codebook,
    )


def _run_trial(
    experiment: Experiment, point: int, ebn0_db: float, n0: float, trial: int
) -> tuple[int, int]:
    config = experiment.config
    seed_seq = trial_seed(config.seed, point, trial)
    try:
        rng = np.random.default_rng(seed_seq)
        chan = sample_channel(config.P, config.ell_max, config.f_max, config.fractional_doppler, rng)
        h = channel_matrix(chan, experiment.params.c1, config.N)
        bits = rng.integers(0, 2, config.bits_per_frame, dtype=np.uint8)
        frame = encode(bits, experiment.codebook, experiment.constellation)
        r = apply_channel(frame.signal, h, n0, rng)
        gas_config = config.gas.model_copy(update={"seed": int(rng.integers(2**63))})
        result = detect(
            config.detector,
            r,
            h,
            experiment.codebook,
            experiment.constellation,
            config.filter_n0 if config.filter_n0 is not None else n0,
            gas_config=gas_config,
            ml_budget=config.ml_candidate_budget,
        )
        decoded = decode_bits(result.x_hat, result.k_hat, experiment.codebook, experiment.constellation)
    except (CpimError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise SimulationError(
            f"trial {trial} at {ebn0_db} dB failed (seed {config.seed}, "
            f"spawn key {seed_seq.spawn_key}): {exc}"
        ) from exc
    errors = decoded != frame.bits
    b1 = config.symbol_bits
    return int(errors[:b1].sum()), int(errors[b1:].sum())


def run_ber_point(
    config: SimConfig,
    ebn0_db: float,
    *,
    point: int | None = None,
    experiment: Experiment | None = None,
    jobs: int = 1,
) -> BerPoint:
    """Run trials at one Eb/N0 until the trial cap or the error target is hit.

    Args:
        config: Sweep configuration.
        ebn0_db: Eb/N0 of this point in dB.
        point: Grid index keying the trial streams; looked up in
            ``config.ebn0_grid_db`` when omitted.
        experiment: Prepared experiment to reuse across points.
        jobs: Worker threads per batch.

    Returns:
        Error counts of the point.

    Raises:
        ConfigError: ``point`` is omitted and ``ebn0_db`` is not on the grid.
        SimulationError: A trial failed; chained to the underlying error.
    """
    if point is None:
        try:
            point = config.ebn0_grid_db.index(ebn0_db)
        except ValueError as exc:
            raise ConfigError(
                f"{ebn0_db} dB is not on ebn0_grid_db {config.ebn0_grid_db}; pass point explicitly"
            ) from exc
    experiment = experiment if experiment is not None else prepare_experiment(config)
    n0 = (
        config.channel_n0
        if config.channel_n0 is not None
        else noise_variance_from_ebn0(ebn0_db, config.N, config.M, config.K)
    )
    run = partial(_run_trial, experiment, point, ebn0_db, n0)

    trials = symbol_errors = index_errors = 0
    stop = False
    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        while not stop and trials < config.trials_per_point:
            batch = range(trials, min(trials + config.batch_size, config.trials_per_point))
            outcomes = list(pool.map(run, batch)) if jobs > 1 else [run(t) for t in batch]
            for s_err, i_err in outcomes:
                trials += 1
                symbol_errors += s_err
                index_errors += i_err
                if config.target_bit_errors and symbol_errors + index_errors >= config.target_bit_errors:
                    stop = True
                    break

    point = BerPoint(
        ebn0_db=float(ebn0_db),
        trials=trials,
        symbol_bit_errors=symbol_errors,
        index_bit_errors=index_errors,
        symbol_bits=trials * config.symbol_bits,
        index_bits=trials * config.index_bits,
    )
    logger.info(
        "Eb/N0 %.2f dB: %d trials, BER %.3e (symbol %.3e, index %.3e)",
        ebn0_db,
        trials,
        point.ber_total,
        point.ber_symbol,
        point.ber_index,
    )
    return point


def _check_monotone(points: list[BerPoint]) -> None:
    for lo, hi in zip(points, points[1:]):
        if hi.ebn0_db <= lo.ebn0_db:
            continue
        sigma = math.sqrt(
            lo.ber_total * (1 - lo.ber_total) / lo.total_bits
            + hi.ber_total * (1 - hi.ber_total) / hi.total_bits
        )
        if hi.ber_total > lo.ber_total + 2 * sigma:
            logger.warning(
                "BER rises from %.3e at %.2f dB to %.3e at %.2f dB (beyond 2 sigma)",
                lo.ber_total,
                lo.ebn0_db,
                hi.ber_total,
                hi.ebn0_db,
            )


def shifted_reference(
    classical: list[BerPoint], n: int, m: int, k: int
) -> list[tuple[float, float]]:
    """Classical AFDM curve moved left by the rate gain of a size-K codebook."""
    gain = theoretical_gain_db(n, m, k)
    return [(p.ebn0_db - gain, p.ber_total) for p in classical]


def package_version() -> str:
    try:
        return version("afdm-cpim")
    except PackageNotFoundError:
        return "unknown"


def config_hash(config: BaseModel) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def sweep(config: SimConfig, *, jobs: int = 1) -> SweepResult:
    """
    Run every point of ``ebn0_grid_db`` with a shared codebook.

    Args:
        config: Sweep configuration
        jobs: Worker threads per batch; results do not depend on it

    Returns:
        SweepResult with one BerPoint per grid value, run metadata and, when
        ``include_reference`` is set and K > 1, the classical curve shifted by
        the theoretical gain
    """
    started = time.perf_counter()
    experiment = prepare_experiment(config)
    logger.info(
        "sweep N=%d M=%d K=%d detector=%s codebook=%s",
        config.N,
        config.M,
        config.K,
        config.detector,
        [e.index for e in experiment.codebook.entries],
    )
    points = [
        run_ber_point(config, ebn0, point=i, experiment=experiment, jobs=jobs)
        for i, ebn0 in enumerate(config.ebn0_grid_db)
    ]
    _check_monotone(points)

    reference = None
    if config.include_reference and config.K > 1:
        classical = config.model_copy(update={"K": 1, "include_reference": False})
        classical_exp = prepare_experiment(classical)
        classical_points = [
            run_ber_point(classical, ebn0, point=i, experiment=classical_exp, jobs=jobs)
            for i, ebn0 in enumerate(config.ebn0_grid_db)
        ]
        reference = shifted_reference(classical_points, config.N, config.M, config.K)

    metadata = {
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "version": package_version(),
        "codebook": [e.index for e in experiment.codebook.entries],
        "theoretical_gain_db": theoretical_gain_db(config.N, config.M, config.K),
        "wall_time_s": time.perf_counter() - started,
    }
    return SweepResult(points=points, metadata=metadata, reference=reference, experiment=experiment)


BER_COLUMNS = (
    "ebn0_db",
    "trials",
    "symbol_bit_errors",
    "index_bit_errors",
    "total_bits",
    "ber_symbol",
    "ber_index",
    "ber_total",
)


def write_ber_csv(path: Path, points: list[BerPoint]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BER_COLUMNS)
        for p in points:
            writer.writerow(
                [
                    repr(p.ebn0_db),
                    p.trials,
                    p.symbol_bit_errors,
                    p.index_bit_errors,
                    p.total_bits,
                    repr(p.ber_symbol),
                    repr(p.ber_index),
                    repr(p.ber_total),
                ]
            )


def write_reference_csv(path: Path, reference: list[tuple[float, float]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ebn0_db", "ber_total"])
        for ebn0, ber in reference:
            writer.writerow([repr(float(ebn0)), repr(float(ber))])


def write_metadata(path: Path, metadata: dict[str, Any]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
