import numpy as np
import pytest

import harp


def seeded_bytes(seed: int, n: int) -> bytes:
    return np.random.default_rng(seed).integers(0, 256, n, dtype=np.int64).astype(np.uint8).tobytes()


@pytest.fixture(scope="session")
def mini_ckpt():
    return harp.generate_model(harp.PRESETS["mini"], 42)


@pytest.fixture(scope="session")
def desk_ckpt():
    return harp.generate_model(harp.PRESETS["desk"], 42)


@pytest.fixture(scope="session")
def corpus_2k():
    return harp.tokenize(seeded_bytes(2, 2048), "small-2k")


@pytest.fixture(scope="session")
def corpus_8k():
    # The golden-perplexity corpus; regenerating it must never change.
    return harp.tokenize(seeded_bytes(8, 8192), "golden-8k")


@pytest.fixture(scope="session")
def corpus_32k():
    return harp.tokenize(seeded_bytes(32, 32768), "search-32k")
