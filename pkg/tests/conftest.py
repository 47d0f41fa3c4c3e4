import numpy as np
import pytest

from afdm_cpim.afdm import ChirpParams
from afdm_cpim.channel import channel_matrix, sample_channel
from afdm_cpim.codec import Codebook, Constellation


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def params4() -> ChirpParams:
    return ChirpParams.optimal(4, f_max=1.0)


@pytest.fixture
def params8() -> ChirpParams:
    return ChirpParams.optimal(8, f_max=1.0)


@pytest.fixture
def bpsk() -> Constellation:
    return Constellation.from_order(2)


@pytest.fixture
def codebook4(params4: ChirpParams) -> Codebook:
    return Codebook.from_indices(params4, [1, 24])


@pytest.fixture
def codebook8(params8: ChirpParams) -> Codebook:
    return Codebook.from_indices(params8, [1, 40320])


@pytest.fixture
def random_h():
    """Factory for a dense channel matrix of a random realization with N >= 4."""

    def make(params: ChirpParams, rng: np.random.Generator, *, n_paths: int = 2, ell_max: int = 1):
        chan = sample_channel(n_paths, ell_max, 1.0, False, rng)
        return channel_matrix(chan, params.c1, params.n_subcarriers, sparse=False)

    return make
