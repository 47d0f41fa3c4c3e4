"""AFDM-CPIM detectors.

full_ml   exhaustive search over every (codeword, symbol vector) pair
mmse_ml   one shared MMSE factor, K filters, K residual evaluations
gas       K emulated Grover Adaptive Search devices on the binary ML objective
"""

import logging
from dataclasses import dataclass
from enum import StrEnum
from functools import cached_property

import numpy as np
import scipy.linalg

from afdm_cpim.afdm import DaftMatrix, demodulate, modulate
from afdm_cpim.channel import ChannelMatrix, as_dense
from afdm_cpim.codec import Codebook, Constellation, map_symbols, project
from afdm_cpim.errors import BudgetExceededError, InvalidDimensionError, NumericalError
from afdm_cpim.gas import GasConfig, parallel_ml_solve
from afdm_cpim.settings import settings

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
_CANDIDATE_CHUNK = 1 << 14


class DetectionMethod(StrEnum):
    FULL_ML = "full_ml"
    MMSE_ML = "mmse_ml"
    GAS = "gas"


@dataclass(frozen=True, eq=False)
class DetectionResult:
    x_hat: np.ndarray
    k_hat: int
    metric: float
    method: DetectionMethod
    residual_evaluations: int = 0


def residual(r: np.ndarray, h: ChannelMatrix, daft: DaftMatrix, x: np.ndarray) -> float:
    """||r - H A_k^{-1} x||^2, the received-domain ML metric."""
    e = np.asarray(r, dtype=np.complex128) - h @ modulate(x, daft)
    return float(np.vdot(e, e).real)


def demodulated_residual(
    r: np.ndarray, h: ChannelMatrix, daft: DaftMatrix, x: np.ndarray
) -> float:
    """||A_k r - A_k H A_k^{-1} x||^2, equal to ``residual`` because A_k is unitary."""
    e = demodulate(r, daft) - demodulate(h @ modulate(x, daft), daft)
    return float(np.vdot(e, e).real)


def _symbol_candidates(constellation: Constellation, n: int, start: int, stop: int) -> np.ndarray:
    # candidate c lists its symbol labels as base-M digits, most significant first
    m = constellation.order
    idx = np.arange(start, stop, dtype=np.int64)
    powers = m ** np.arange(n - 1, -1, -1, dtype=np.int64)
    labels = (idx[:, None] // powers[None, :]) % m
    return constellation.points[labels]


def ml_detect_full(
    r: np.ndarray,
    h: ChannelMatrix,
    codebook: Codebook,
    constellation: Constellation,
    *,
    budget: int | None = None,
) -> DetectionResult:
    n = codebook.params.n_subcarriers
    budget = settings.ML_CANDIDATE_BUDGET if budget is None else budget
    per_codeword = constellation.order**n
    candidates = codebook.size * per_codeword
    if candidates > budget:
        raise BudgetExceededError(
            f"full ML needs K*M^N = {codebook.size}*{constellation.order}^{n} = {candidates} "
            f"candidates, above the budget of {budget}; use mmse_ml or gas instead"
        )
    r = np.asarray(r, dtype=np.complex128)
    if r.shape != (n,):
        raise InvalidDimensionError(f"received vector has shape {r.shape}, expected ({n},)")
    hd = as_dense(h)

    best_metric, best_k, best_x = np.inf, 0, None
    for k, daft in enumerate(codebook.dafts, start=1):
        phi_t = (hd @ modulate(np.eye(n), daft)).T
        for start in range(0, per_codeword, _CANDIDATE_CHUNK):
            x = _symbol_candidates(constellation, n, start, min(start + _CANDIDATE_CHUNK, per_codeword))
            e = r[None, :] - x @ phi_t
            metrics = np.einsum("ij,ij->i", e.conj(), e).real
            j = int(np.argmin(metrics))
            # strict comparison keeps the smaller k, then the earlier bit pattern
            if metrics[j] < best_metric:
                best_metric, best_k, best_x = metrics[j], k, x[j].copy()

    return DetectionResult(
        x_hat=best_x,
        k_hat=best_k,
        metric=residual(r, h, codebook.daft(best_k), best_x),
        method=DetectionMethod.FULL_ML,
        residual_evaluations=candidates,
    )


@dataclass(frozen=True, eq=False)
class MmseFilterBank:
    """M_k = A_k . H^H (H H^H + N0 I)^{-1}, sharing one factor across k."""

    common: np.ndarray
    dafts: tuple[DaftMatrix, ...]
    n0: float
    condition_number: float
    inversions: int = 1

    @cached_property
    def per_perm(self) -> tuple[np.ndarray, ...]:
        return tuple(demodulate(self.common, daft) for daft in self.dafts)

    def equalize(self, r: np.ndarray) -> list[np.ndarray]:
        """Soft estimates M_k r for every k, as A_k (common r)."""
        z = self.common @ np.asarray(r, dtype=np.complex128)
        return [demodulate(z, daft) for daft in self.dafts]


def build_mmse_bank(h: ChannelMatrix, codebook: Codebook, n0: float) -> MmseFilterBank:
    if n0 < 0:
        raise ValueError(f"filter noise variance must be non-negative, got {n0}")
    hd = as_dense(h)
    n = hd.shape[0]
    if n != codebook.params.n_subcarriers:
        raise InvalidDimensionError(f"H is {hd.shape} for a codebook with N={codebook.params.n_subcarriers}")
    gram = hd @ hd.conj().T + n0 * np.eye(n)
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise NumericalError(
            f"H H^H + N0 I is singular to working precision (condition number {cond:.3e}, "
            f"limit {CONDITION_LIMIT:.0e}); raise the filter N0",
            condition_number=cond,
        )
    # (H H^H + N0 I) is Hermitian, so common^H = (H H^H + N0 I)^{-1} H
    common = scipy.linalg.solve(gram, hd, assume_a="her").conj().T
    return MmseFilterBank(common=common, dafts=codebook.dafts, n0=n0, condition_number=cond)


def mmse_ml_detect(
    r: np.ndarray,
    h: ChannelMatrix,
    codebook: Codebook,
    n0: float,
    constellation: Constellation,
    *,
    bank: MmseFilterBank | None = None,
) -> DetectionResult:
    bank = bank if bank is not None else build_mmse_bank(h, codebook, n0)
    best_metric, best_k, best_x = np.inf, 0, None
    evaluations = 0
    for k, (daft, soft) in enumerate(zip(codebook.dafts, bank.equalize(r)), start=1):
        x_k = project(soft, constellation)
        metric = residual(r, h, daft, x_k)
        evaluations += 1
        if metric < best_metric:
            best_metric, best_k, best_x = metric, k, x_k
    return DetectionResult(
        x_hat=best_x,
        k_hat=best_k,
        metric=best_metric,
        method=DetectionMethod.MMSE_ML,
        residual_evaluations=evaluations,
    )


def gas_detect(
    r: np.ndarray,
    h: ChannelMatrix,
    codebook: Codebook,
    constellation: Constellation,
    config: GasConfig,
    *,
    jobs: int = 1,
) -> DetectionResult:
    solution = parallel_ml_solve(r, h, codebook, constellation, config, jobs=jobs)
    x_hat = map_symbols(solution.bits, constellation)
    return DetectionResult(
        x_hat=x_hat,
        k_hat=solution.k,
        metric=residual(r, h, codebook.daft(solution.k), x_hat),
        method=DetectionMethod.GAS,
        residual_evaluations=solution.oracle_queries,
    )


def detect(
    method: DetectionMethod | str,
    r: np.ndarray,
    h: ChannelMatrix,
    codebook: Codebook,
    constellation: Constellation,
    n0: float,
    *,
    gas_config: GasConfig | None = None,
    ml_budget: int | None = None,
) -> DetectionResult:
    """
    Detect (x, k) with the chosen method.

    Args:
        method: ``full_ml``, ``mmse_ml`` or ``gas``
        r: Received vector
        h: Channel matrix, known at the receiver
        codebook: Codebook of K permuted DAFT matrices
        constellation: Symbol alphabet
        n0: Noise variance used by the MMSE filter
        gas_config: Settings of the ``gas`` detector
        ml_budget: Candidate budget of ``full_ml``; settings default when None

    Returns:
        DetectionResult with x_hat, k_hat, the residual metric and evaluation count
    """
    match DetectionMethod(method):
        case DetectionMethod.FULL_ML:
            return ml_detect_full(r, h, codebook, constellation, budget=ml_budget)
        case DetectionMethod.MMSE_ML:
            return mmse_ml_detect(r, h, codebook, n0, constellation)
        case DetectionMethod.GAS:
            return gas_detect(r, h, codebook, constellation, gas_config or GasConfig())
