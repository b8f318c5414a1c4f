import numpy as np
import pytest

from retouch import BinaryMask, Image


def rand_image(rng: np.random.Generator, h: int, w: int) -> Image:
    return Image(rng.random((h, w, 3), dtype=np.float32))


def rand_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.5) -> BinaryMask:
    return BinaryMask((rng.random((h, w)) < p).astype(np.uint8))


def rand_nonempty_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.5) -> BinaryMask:
    data = (rng.random((h, w)) < p).astype(np.uint8)
    data[rng.integers(h), rng.integers(w)] = 1
    return BinaryMask(data)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
