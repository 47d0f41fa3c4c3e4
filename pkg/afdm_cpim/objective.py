"""Polynomial binary objectives, the input format of the GAS engine.

An objective is a multilinear polynomial

    E(b) = constant + sum_S c_S prod_{i in S} b_i,   b in {0, 1}^n

stored as a mapping from sorted variable tuples to real coefficients. States
are numbered MSB first: state s has b_i = (s >> (n - 1 - i)) & 1, so state order
is lexicographic order of the bit vectors.
"""

import json
import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from afdm_cpim.errors import BudgetExceededError, InvalidDimensionError
from afdm_cpim.settings import settings

logger = logging.getLogger(__name__)

_CHUNK_STATES = 1 << 18


def states_to_bits(states: np.ndarray, n_vars: int) -> np.ndarray:
    shifts = np.arange(n_vars - 1, -1, -1, dtype=np.int64)
    return ((np.asarray(states, dtype=np.int64)[:, None] >> shifts[None, :]) & 1).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class EnergyLandscape:
    """Oracle values of every state plus their ascending order.

    The good set of a threshold y, {b : E(b) < y}, is always a prefix of
    ``order``, so one sort serves every threshold.
    """

    n_vars: int
    energies: np.ndarray
    order: np.ndarray
    sorted_energies: np.ndarray

    @property
    def size(self) -> int:
        return self.energies.size

    def count_below(self, y: float) -> int:
        return int(np.searchsorted(self.sorted_energies, y, side="left"))


class PolynomialBinaryObjective:
    def __init__(
        self,
        n_vars: int,
        terms: Mapping[tuple[int, ...], float] | None = None,
        constant: float = 0.0,
        metadata: dict[str, Any] | None = None,
    ) -> None:
        if n_vars < 0:
            raise InvalidDimensionError(f"number of variables must be >= 0, got {n_vars}")
        self.n_vars = n_vars
        self.constant = float(constant)
        self.metadata = dict(metadata or {})
        self.terms: dict[tuple[int, ...], float] = {}
        self._landscapes: dict[tuple[int | None, int | None], EnergyLandscape] = {}
        for subset, coef in (terms or {}).items():
            self.add_term(subset, coef)

    @classmethod
    def from_terms(
        cls,
        n_vars: int,
        terms: Iterable[tuple[Iterable[int], float]],
        constant: float = 0.0,
        metadata: dict[str, Any] | None = None,
    ) -> "PolynomialBinaryObjective":
        obj = cls(n_vars, constant=constant, metadata=metadata)
        for subset, coef in terms:
            obj.add_term(subset, coef)
        return obj

    def add_term(self, subset: Iterable[int], coef: float) -> None:
        # b_i^2 = b_i, so repeated variables collapse
        key = tuple(sorted(set(int(i) for i in subset)))
        if key and not (0 <= key[0] and key[-1] < self.n_vars):
            raise InvalidDimensionError(f"term {key} references a variable outside [0, {self.n_vars})")
        if not key:
            self.constant += float(coef)
            return
        total = self.terms.get(key, 0.0) + float(coef)
        if total == 0.0:
            self.terms.pop(key, None)
        else:
            self.terms[key] = total
        self._landscapes = {}

    @property
    def degree(self) -> int:
        return max((len(k) for k in self.terms), default=0)

    def evaluate(self, b) -> float:
        bits = np.asarray(b, dtype=np.uint8).ravel()
        if bits.size != self.n_vars:
            raise InvalidDimensionError(f"expected {self.n_vars} bits, got {bits.size}")
        active = [coef for subset, coef in self.terms.items() if all(bits[i] for i in subset)]
        return math.fsum([self.constant, *active])

    def quadratic_form(self) -> tuple[np.ndarray, np.ndarray, float]:
        """(Q strictly upper triangular, linear, constant) for degree <= 2."""
        if self.degree > 2:
            raise ValueError(f"objective has degree {self.degree}, not quadratic")
        q = np.zeros((self.n_vars, self.n_vars))
        lin = np.zeros(self.n_vars)
        for subset, coef in self.terms.items():
            if len(subset) == 1:
                lin[subset[0]] += coef
            else:
                q[subset[0], subset[1]] += coef
        return q, lin, self.constant

    def evaluate_many(self, bits: np.ndarray) -> np.ndarray:
        """Vectorised evaluation of a (states x n_vars) 0/1 matrix."""
        x = np.asarray(bits, dtype=np.float64)
        if self.degree <= 2:
            q, lin, const = self.quadratic_form()
            return const + x @ lin + np.einsum("ij,ij->i", x @ q, x)
        out = np.full(x.shape[0], self.constant)
        for subset, coef in self.terms.items():
            out += coef * np.prod(x[:, list(subset)], axis=1)
        return out

    def quantized(self, fraction_bits: int) -> "PolynomialBinaryObjective":
        """Copy with every coefficient rounded to ``fraction_bits`` fractional bits."""
        scale = float(1 << fraction_bits)
        return PolynomialBinaryObjective(
            self.n_vars,
            {k: round(c * scale) / scale for k, c in self.terms.items()},
            round(self.constant * scale) / scale,
            self.metadata,
        )

    def landscape(
        self, fixed_point_bits: int | None = None, register_bits: int | None = None
    ) -> EnergyLandscape:
        key = (fixed_point_bits, register_bits)
        if key not in self._landscapes:
            self._landscapes[key] = self._build_landscape(fixed_point_bits, register_bits)
        return self._landscapes[key]

    def _build_landscape(
        self, fixed_point_bits: int | None, register_bits: int | None
    ) -> EnergyLandscape:
        if self.n_vars > settings.EMULATION_MAX_VARS:
            raise BudgetExceededError(
                f"{self.n_vars} binary variables exceed the emulation budget of "
                f"{settings.EMULATION_MAX_VARS}; reduce the instance size (pool size, N or M)"
            )
        source = self if fixed_point_bits is None else self.quantized(fixed_point_bits)
        size = 1 << self.n_vars
        energies = np.empty(size)
        for start in range(0, size, _CHUNK_STATES):
            states = np.arange(start, min(start + _CHUNK_STATES, size))
            energies[start : start + states.size] = source.evaluate_many(
                states_to_bits(states, self.n_vars)
            )
        if fixed_point_bits is not None:
            scale = float(1 << fixed_point_bits)
            ints = np.rint(energies * scale).astype(np.int64)
            if register_bits is not None:
                # two's-complement wraparound of the value register
                half = 1 << (register_bits - 1)
                ints = (ints + half) % (1 << register_bits) - half
            energies = ints / scale
        order = np.argsort(energies, kind="stable")
        logger.debug("built landscape over %d states (degree %d)", size, self.degree)
        return EnergyLandscape(
            n_vars=self.n_vars,
            energies=energies,
            order=order,
            sorted_energies=energies[order],
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "n_vars": self.n_vars,
            "constant": self.constant,
            "terms": [{"vars": list(k), "coef": c} for k, c in self.terms.items()],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "PolynomialBinaryObjective":
        return cls.from_terms(
            int(data["n_vars"]),
            ((t["vars"], float(t["coef"])) for t in data.get("terms", [])),
            float(data.get("constant", 0.0)),
        )

    @classmethod
    def load(cls, path: Path) -> "PolynomialBinaryObjective":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def __repr__(self) -> str:
        return (
            f"PolynomialBinaryObjective(n_vars={self.n_vars}, terms={len(self.terms)}, "
            f"degree={self.degree})"
        )


def exhaustive_minimize(obj: PolynomialBinaryObjective) -> tuple[np.ndarray, float]:
    """Reference minimiser; ties resolve to the lexicographically smallest bits."""
    land = obj.landscape()
    best = int(land.order[0])
    bits = states_to_bits(np.asarray([best]), obj.n_vars)[0]
    return bits, obj.evaluate(bits)
