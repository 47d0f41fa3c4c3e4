"""AFDM-CPIM bit stream codec.

A frame carries B = N log2(M) + log2(K) bits: the first N log2(M) select the
constellation symbols, the remaining log2(K) (most-significant bit first)
select which permuted DAFT matrix of the codebook modulates them.
"""

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from afdm_cpim.afdm import (
    ChirpParams,
    DaftMatrix,
    PermutationIndex,
    daft_matrix,
    index_from_permutation,
    modulate,
)
from afdm_cpim.errors import (
    InvalidDimensionError,
    PermutationIndexError,
    UnsupportedConstellationError,
)

# Multilinear bit polynomials of one symbol: {bit positions within the label: coefficient}.
# BPSK is the rotated mapping x = [(1-2b) + j(1-2b)]/sqrt(2); QPSK and 16-QAM follow the
# 5G NR mapper, which is Gray coded.
_S2 = 1.0 / math.sqrt(2.0)
_S10 = 1.0 / math.sqrt(10.0)
_SYMBOL_TERMS: dict[int, dict[tuple[int, ...], complex]] = {
    2: {(): (1 + 1j) * _S2, (0,): -2 * (1 + 1j) * _S2},
    4: {(): (1 + 1j) * _S2, (0,): -2 * _S2, (1,): -2j * _S2},
    16: {
        (): (1 + 1j) * _S10,
        (0,): -2 * _S10,
        (2,): 2 * _S10,
        (0, 2): -4 * _S10,
        (1,): -2j * _S10,
        (3,): 2j * _S10,
        (1, 3): -4j * _S10,
    },
}


def _label_bits(labels: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1)
    return ((labels[:, None] >> shifts[None, :]) & 1).astype(np.uint8)


def _bits_to_labels(bits: np.ndarray, width: int) -> np.ndarray:
    weights = 1 << np.arange(width - 1, -1, -1)
    return bits.reshape(-1, width).astype(np.int64) @ weights


@dataclass(frozen=True, eq=False)
class Constellation:
    order: int
    terms: dict[tuple[int, ...], complex]
    points: np.ndarray

    @classmethod
    def from_order(cls, order: int) -> "Constellation":
        if order not in _SYMBOL_TERMS:
            raise UnsupportedConstellationError(
                f"constellation order {order} not supported; use one of {sorted(_SYMBOL_TERMS)}"
            )
        terms = _SYMBOL_TERMS[order]
        width = int(math.log2(order))
        label_bits = _label_bits(np.arange(order), width)
        points = np.zeros(order, dtype=np.complex128)
        for subset, coef in terms.items():
            points += coef * np.prod(label_bits[:, list(subset)], axis=1)
        points.setflags(write=False)
        return cls(order=order, terms=terms, points=points)

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    @cached_property
    def label_bits(self) -> np.ndarray:
        return _label_bits(np.arange(self.order), self.bits_per_symbol)

    def nearest_labels(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.complex128).ravel()
        d2 = np.abs(v[:, None] - self.points[None, :]) ** 2
        return d2.argmin(axis=1)


def map_symbols(symbol_bits, constellation: Constellation) -> np.ndarray:
    bits = np.asarray(symbol_bits, dtype=np.uint8).ravel()
    width = constellation.bits_per_symbol
    if bits.size % width:
        raise InvalidDimensionError(
            f"{bits.size} bits is not a multiple of {width} bits per symbol"
        )
    return constellation.points[_bits_to_labels(bits, width)]


def demap_symbols(x, constellation: Constellation) -> np.ndarray:
    """Hard decision back to bits, nearest point first."""
    labels = constellation.nearest_labels(x)
    return constellation.label_bits[labels].ravel()


def project(v, constellation: Constellation) -> np.ndarray:
    """Per-entry Euclidean projection onto the constellation."""
    return constellation.points[constellation.nearest_labels(v)]


@dataclass(frozen=True, eq=False)
class Codebook:
    params: ChirpParams
    entries: tuple[PermutationIndex, ...]

    def __post_init__(self) -> None:
        k = len(self.entries)
        if k < 1 or k & (k - 1):
            raise ValueError(f"codebook size must be a power of two, got {k}")
        if len(set(self.entries)) != k:
            raise ValueError("codebook entries must be distinct")
        for e in self.entries:
            if e.order != self.params.n_subcarriers:
                raise InvalidDimensionError(
                    f"entry of order {e.order} in a codebook for N={self.params.n_subcarriers}"
                )

    @classmethod
    def from_indices(cls, params: ChirpParams, indices) -> "Codebook":
        n = params.n_subcarriers
        return cls(params, tuple(PermutationIndex(int(i), n) for i in indices))

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def index_bits(self) -> int:
        return self.size.bit_length() - 1

    @cached_property
    def dafts(self) -> tuple[DaftMatrix, ...]:
        return tuple(daft_matrix(self.params, e) for e in self.entries)

    def daft(self, k: int) -> DaftMatrix:
        """Codeword k, 1-based."""
        if not 1 <= k <= self.size:
            raise PermutationIndexError(f"codeword index {k} outside [1, {self.size}]")
        return self.dafts[k - 1]


@dataclass(frozen=True, eq=False)
class CpimFrame:
    bits: np.ndarray
    symbols: np.ndarray
    perm_choice: int
    signal: np.ndarray


def frame_bits(n: int, m: int, k: int) -> int:
    return n * int(math.log2(m)) + int(math.log2(k))


def spectral_gain(n: int, m: int, k: int) -> float:
    """Rate of CPIM relative to classical AFDM, 1 + log2(K) / (N log2(M))."""
    return 1.0 + math.log2(k) / (n * math.log2(m))


def bit_split(bits, n: int, m: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    b1 = n * int(math.log2(m))
    expected = frame_bits(n, m, k)
    if bits.size != expected:
        raise InvalidDimensionError(f"frame needs {expected} bits, got {bits.size}")
    return bits[:b1], bits[b1:]


def index_from_bits(index_bits) -> int:
    """k* = 1 + binary value of the index bits, MSB first."""
    k = 0
    for b in np.asarray(index_bits, dtype=np.uint8).ravel():
        k = (k << 1) | int(b)
    return k + 1


def bits_from_index(k: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(0, dtype=np.uint8)
    return _label_bits(np.asarray([k - 1]), width)[0]


def encode(bits, codebook: Codebook, constellation: Constellation) -> CpimFrame:
    """
    Map one frame of bits to a transmit signal.

    Args:
        bits: N log2(M) symbol bits followed by log2(K) index bits, MSB first
        codebook: Codebook selecting the DAFT from the index bits
        constellation: Symbol alphabet for the symbol bits

    Returns:
        CpimFrame with the bits, the symbols x, the chosen index k* and s = A_{k*}^{-1} x
    """
    n = codebook.params.n_subcarriers
    symbol_bits, index_bits = bit_split(bits, n, constellation.order, codebook.size)
    k_star = index_from_bits(index_bits)
    x = map_symbols(symbol_bits, constellation)
    s = modulate(x, codebook.daft(k_star))
    return CpimFrame(
        bits=np.concatenate([symbol_bits, index_bits]),
        symbols=x,
        perm_choice=k_star,
        signal=s,
    )


def decode_bits(x_hat, k_hat: int, codebook: Codebook, constellation: Constellation) -> np.ndarray:
    """Inverse of ``encode``: hard-decided symbol bits, then the index bits of k_hat."""
    if not 1 <= k_hat <= codebook.size:
        raise PermutationIndexError(f"detected index {k_hat} outside [1, {codebook.size}]")
    return np.concatenate(
        [demap_symbols(x_hat, constellation), bits_from_index(k_hat, codebook.index_bits)]
    )


def random_codebook(params: ChirpParams, size: int, rng: np.random.Generator) -> Codebook:
    """Uniformly drawn distinct permutations."""
    n = params.n_subcarriers
    if size > math.factorial(n):
        raise ValueError(f"cannot draw {size} distinct permutations of {n} elements")
    chosen: dict[int, PermutationIndex] = {}
    while len(chosen) < size:
        idx = index_from_permutation(rng.permutation(n))
        chosen.setdefault(idx.index, idx)
    return Codebook(params, tuple(chosen.values()))


class CodebookFile(BaseModel):
    N: int = Field(..., ge=2)
    c1: float
    c2: float
    K: int = Field(..., ge=1)
    q: list[int]
    xi: int = 0
    f_max: float | None = None
    metric: str | None = None
    d_min: float | None = None


def save_codebook(path: Path, codebook: Codebook, **extra: Any) -> None:
    p = codebook.params
    record = CodebookFile(
        N=p.n_subcarriers,
        c1=p.c1,
        c2=p.c2,
        K=codebook.size,
        q=[e.index for e in codebook.entries],
        xi=p.guard_xi,
        f_max=p.f_max,
        **extra,
    )
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(record.model_dump(), fh, indent=2)


def load_codebook(path: Path) -> tuple[Codebook, CodebookFile]:
    with Path(path).open("r", encoding="utf-8") as fh:
        record = CodebookFile.model_validate(json.load(fh))
    if len(record.q) != record.K:
        raise ValueError(f"codebook file lists {len(record.q)} entries but K={record.K}")
    params = ChirpParams(
        n_subcarriers=record.N, c1=record.c1, c2=record.c2, guard_xi=record.xi, f_max=record.f_max
    )
    return Codebook.from_indices(params, record.q), record
