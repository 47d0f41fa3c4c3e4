"""Doubly-dispersive (delay-Doppler) channels.

    H = sum_p h_p . Phi_p . Z^{f_p} . Pi^{l_p}

Each path puts exactly one nonzero in every row of H, so the matrix is
assembled from (row, col, value) triplets and only densified for small N.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from afdm_cpim.afdm import DaftMatrix, PermutationIndex, demodulate, modulate
from afdm_cpim.errors import InvalidDelayError, InvalidDimensionError, SamplerError

logger = logging.getLogger(__name__)

# Above this size H is kept as a CSR array
DENSE_MAX_N = 64

ChannelMatrix = np.ndarray | scipy.sparse.csr_array


@dataclass(frozen=True)
class ChannelPath:
    gain: complex
    delay: int
    doppler: float


@dataclass(frozen=True)
class ChannelRealization:
    paths: tuple[ChannelPath, ...]
    ell_max: int
    f_max: float

    def __post_init__(self) -> None:
        if not self.paths:
            raise SamplerError("a channel needs at least one path")
        for p in self.paths:
            if not 0 <= p.delay <= self.ell_max:
                raise InvalidDelayError(f"path delay {p.delay} outside [0, {self.ell_max}]")
            if abs(p.doppler) > self.f_max:
                raise SamplerError(f"path Doppler {p.doppler} exceeds f_max={self.f_max}")

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def max_delay(self) -> int:
        return max(p.delay for p in self.paths)


@dataclass(frozen=True, eq=False)
class EffectiveChannel:
    g: np.ndarray
    perm: PermutationIndex


def sample_channel(
    n_paths: int,
    ell_max: int,
    f_max: float,
    fractional_doppler: bool,
    rng: np.random.Generator,
    *,
    distinct_delays: bool = True,
) -> ChannelRealization:
    """Draw a realization with E[sum |h_p|^2] = 1.

    Gains are CN(0, 1/P). Delays are uniform on {0..ell_max} (distinct by
    default). Dopplers are uniform integers in [-f_max, f_max], or uniform
    reals when ``fractional_doppler`` is set.
    """
    if n_paths < 1 or ell_max < 0 or f_max < 0:
        raise SamplerError(
            f"invalid channel profile P={n_paths}, ell_max={ell_max}, f_max={f_max}"
        )
    if distinct_delays and n_paths > ell_max + 1:
        raise SamplerError(
            f"cannot draw {n_paths} distinct delays from {{0..{ell_max}}}"
        )

    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) * math.sqrt(
        0.5 / n_paths
    )
    if distinct_delays:
        delays = rng.choice(ell_max + 1, size=n_paths, replace=False)
    else:
        delays = rng.integers(0, ell_max + 1, size=n_paths)
    if fractional_doppler:
        dopplers = rng.uniform(-f_max, f_max, size=n_paths)
    else:
        f_int = math.floor(f_max)
        dopplers = rng.integers(-f_int, f_int + 1, size=n_paths).astype(np.float64)

    paths = tuple(
        ChannelPath(gain=complex(h), delay=int(ell), doppler=float(f))
        for h, ell, f in zip(gains, delays, dopplers)
    )
    return ChannelRealization(paths=paths, ell_max=ell_max, f_max=f_max)


def phase_matrix_phi(ell_p: int, c1: float, n: int) -> np.ndarray:
    """Diagonal of Phi_p, the chirp-periodic prefix phase of a path with delay ell_p."""
    if not 0 <= ell_p < n:
        raise InvalidDelayError(f"delay {ell_p} must lie in [0, {n})")
    phi = np.ones(n, dtype=np.complex128)
    q = np.arange(ell_p, dtype=np.float64)
    phi[:ell_p] = np.exp(-2j * np.pi * c1 * (n * n - 2.0 * n * (ell_p - q)))
    return phi


def doppler_diagonal(f_p: float, n: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(n) * f_p / n)


def channel_matrix(
    chan: ChannelRealization, c1: float, n: int, *, sparse: bool | None = None
) -> ChannelMatrix:
    """Materialise H. Row m of path p reads sample (m - l_p) mod N."""
    if chan.max_delay >= n:
        raise InvalidDelayError(f"delay {chan.max_delay} does not fit a frame of N={n}")
    rows = np.arange(n)
    all_rows, all_cols, all_vals = [], [], []
    for p in chan.paths:
        all_rows.append(rows)
        all_cols.append((rows - p.delay) % n)
        all_vals.append(p.gain * phase_matrix_phi(p.delay, c1, n) * doppler_diagonal(p.doppler, n))

    h = scipy.sparse.coo_array(
        (np.concatenate(all_vals), (np.concatenate(all_rows), np.concatenate(all_cols))),
        shape=(n, n),
    ).tocsr()
    if sparse is None:
        sparse = n > DENSE_MAX_N
    return h if sparse else h.toarray()


def as_dense(h: ChannelMatrix) -> np.ndarray:
    if scipy.sparse.issparse(h):
        return h.toarray()
    return np.asarray(h, dtype=np.complex128)


def apply_channel(
    s: np.ndarray, h: ChannelMatrix, n0: float, rng: np.random.Generator
) -> np.ndarray:
    """r = H s + w with w ~ CN(0, n0 I)."""
    if n0 < 0:
        raise ValueError(f"noise variance must be non-negative, got {n0}")
    s = np.asarray(s, dtype=np.complex128)
    if h.shape[1] != s.shape[0]:
        raise InvalidDimensionError(f"H is {h.shape} but s has length {s.shape[0]}")
    r = h @ s
    if n0 == 0:
        return r
    noise = rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape)
    return r + math.sqrt(n0 / 2.0) * noise


def effective_channel(h: ChannelMatrix, daft: DaftMatrix) -> EffectiveChannel:
    """G = A_k H A_k^{-1}, built column-wise through the fast transforms."""
    if h.shape != (daft.n, daft.n):
        raise InvalidDimensionError(f"H is {h.shape}, expected {(daft.n, daft.n)}")
    a_inv = modulate(np.eye(daft.n), daft)
    g = demodulate(h @ a_inv, daft)
    return EffectiveChannel(g=g, perm=daft.perm)


def path_positions(chan: ChannelRealization, c1: float, n: int) -> list[int]:
    """Column offset of each integer-Doppler path in the effective channel.

    Row q of G holds path p at column (q + f_p + 2 N c1 l_p) mod N.
    """
    return [int(round(p.doppler + 2 * n * c1 * p.delay)) % n for p in chan.paths]
