import pytest

from spineseg.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def standard_phantom():
    """Default seven-vertebra phantom shared across test modules."""
    return generate_phantom(PhantomSpec(seed=42))


@pytest.fixture(scope="session")
def fused_phantom():
    """Five vertebrae with 2 and 3 fused into one unit."""
    return generate_phantom(PhantomSpec(n_vertebrae=5, fuse_pairs=((2, 3),), seed=7))
