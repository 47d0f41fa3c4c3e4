"""AFDM core: chirps, permutation indexing and (permuted) DAFT modulation.

Two paths are offered for every transform. The dense path multiplies by the
materialised N x N matrices and is kept as the testing reference; the fast
path applies the diagonal-FFT-diagonal factorisation

    A_i = Lambda_{c2,i} . F_N . Lambda_{c1}

without forming any matrix.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft
import scipy.linalg

from afdm_cpim.errors import (
    InvalidDimensionError,
    InvalidPermutationError,
    PermutationIndexError,
)

GOLDEN_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0


def chirp_vector(c: float, n: int) -> np.ndarray:
    """Chirp sequence exp(-j 2 pi c k^2) for k = 0..n-1."""
    if n < 1:
        raise InvalidDimensionError(f"chirp length must be >= 1, got {n}")
    k = np.arange(n, dtype=np.float64)
    return np.exp(-2j * np.pi * c * k * k)


def optimal_c1(f_max: float, xi: int, n: int) -> float:
    """First chirp frequency matched to the maximum Doppler and guard width."""
    if n < 1:
        raise InvalidDimensionError(f"N must be >= 1, got {n}")
    if f_max < 0 or xi < 0:
        raise ValueError(f"f_max and xi must be non-negative, got f_max={f_max}, xi={xi}")
    return (2.0 * (f_max + xi) + 1.0) / (2.0 * n)


def default_c2(n: int) -> float:
    """Deterministic irrational second chirp frequency, (sqrt(5) - 1) / (2N)."""
    if n < 1:
        raise InvalidDimensionError(f"N must be >= 1, got {n}")
    return GOLDEN_CONJUGATE / n


def dft_matrix(n: int) -> np.ndarray:
    """Unitary N-point DFT matrix."""
    return scipy.linalg.dft(n, scale="sqrtn")


@dataclass(frozen=True)
class ChirpParams:
    n_subcarriers: int
    c1: float
    c2: float
    guard_xi: int = 0
    # Kept for provenance when built through ChirpParams.optimal
    f_max: float | None = None

    def __post_init__(self) -> None:
        if self.n_subcarriers < 2:
            raise InvalidDimensionError(f"N must be >= 2, got {self.n_subcarriers}")
        if self.guard_xi < 0:
            raise ValueError(f"guard width must be non-negative, got {self.guard_xi}")

    @property
    def n(self) -> int:
        return self.n_subcarriers

    @classmethod
    def optimal(
        cls, n: int, f_max: float, xi: int = 0, c2: float | None = None
    ) -> "ChirpParams":
        return cls(
            n_subcarriers=n,
            c1=optimal_c1(f_max, xi, n),
            c2=default_c2(n) if c2 is None else c2,
            guard_xi=xi,
            f_max=f_max,
        )


@dataclass(frozen=True, order=True)
class PermutationIndex:
    """1-based lexicographic rank of a permutation of {0, ..., order-1}."""

    index: int
    order: int

    def __post_init__(self) -> None:
        if self.order < 1:
            raise InvalidDimensionError(f"permutation order must be >= 1, got {self.order}")
        if not 1 <= self.index <= math.factorial(self.order):
            raise PermutationIndexError(
                f"permutation index {self.index} outside [1, {self.order}!]"
            )

    @classmethod
    def identity(cls, order: int) -> "PermutationIndex":
        return cls(1, order)

    def permutation(self) -> np.ndarray:
        return permutation_from_index(self)


def permutation_from_index(i: PermutationIndex) -> np.ndarray:
    """Decode a lexicographic rank through the factorial number system."""
    rank = i.index - 1
    remaining = list(range(i.order))
    out: list[int] = []
    for slot in range(i.order, 0, -1):
        digit, rank = divmod(rank, math.factorial(slot - 1))
        out.append(remaining.pop(digit))
    return np.asarray(out, dtype=np.int64)


def index_from_permutation(perm) -> PermutationIndex:
    values = [int(v) for v in np.asarray(perm).ravel()]
    n = len(values)
    if n == 0 or sorted(values) != list(range(n)):
        raise InvalidPermutationError(
            f"not a permutation of 0..{n - 1}: {values}"
        )
    remaining = list(range(n))
    rank = 0
    for slot, value in enumerate(values):
        digit = remaining.index(value)
        rank += digit * math.factorial(n - 1 - slot)
        remaining.pop(digit)
    return PermutationIndex(rank + 1, n)


@dataclass(frozen=True, eq=False)
class DaftMatrix:
    """Permuted DAFT A_i with its chirp diagonals.

    The dense ``forward`` / ``inverse`` matrices are only built on first access.
    """

    params: ChirpParams
    perm: PermutationIndex
    lambda_c1: np.ndarray = field(repr=False)
    lambda_c2: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.params.n_subcarriers

    @cached_property
    def forward(self) -> np.ndarray:
        return self.lambda_c2[:, None] * dft_matrix(self.n) * self.lambda_c1[None, :]

    @cached_property
    def inverse(self) -> np.ndarray:
        return self.forward.conj().T


def daft_matrix(params: ChirpParams, perm: PermutationIndex) -> DaftMatrix:
    """
    Build the permuted DAFT A = Lambda_{c2}[perm] F_N Lambda_{c1}.

    Args:
        params: Chirp frequencies and frame length N
        perm: Permutation of the second chirp, of order N

    Returns:
        DaftMatrix holding both read-only chirp diagonals; the dense matrix is
        only built on first access to ``forward``
    """
    if perm.order != params.n_subcarriers:
        raise InvalidDimensionError(
            f"permutation order {perm.order} does not match N={params.n_subcarriers}"
        )
    n = params.n_subcarriers
    lambda_c1 = chirp_vector(params.c1, n)
    lambda_c2 = chirp_vector(params.c2, n)[permutation_from_index(perm)]
    lambda_c1.setflags(write=False)
    lambda_c2.setflags(write=False)
    return DaftMatrix(params=params, perm=perm, lambda_c1=lambda_c1, lambda_c2=lambda_c2)


def _checked(v, n: int) -> np.ndarray:
    arr = np.asarray(v, dtype=np.complex128)
    if arr.ndim not in (1, 2) or arr.shape[0] != n:
        raise InvalidDimensionError(f"expected leading dimension {n}, got shape {arr.shape}")
    return arr


def _diag(d: np.ndarray, ndim: int) -> np.ndarray:
    return d if ndim == 1 else d[:, None]


def modulate(x, daft: DaftMatrix, *, dense: bool = False) -> np.ndarray:
    """s = A^{-1} x. Accepts a vector or column-stacked vectors."""
    x = _checked(x, daft.n)
    if dense:
        return daft.inverse @ x
    l1 = _diag(daft.lambda_c1, x.ndim)
    l2 = _diag(daft.lambda_c2, x.ndim)
    return l1.conj() * scipy.fft.ifft(l2.conj() * x, axis=0, norm="ortho")


def demodulate(r, daft: DaftMatrix, *, dense: bool = False) -> np.ndarray:
    """y = A r. Accepts a vector or column-stacked vectors."""
    r = _checked(r, daft.n)
    if dense:
        return daft.forward @ r
    l1 = _diag(daft.lambda_c1, r.ndim)
    l2 = _diag(daft.lambda_c2, r.ndim)
    return l2 * scipy.fft.fft(l1 * r, axis=0, norm="ortho")
