from pathlib import Path

import numpy as np
import pytest

from meshspec.codec import QuantizedMesh, canonicalize
from meshspec.model import ModelConfig, init_random, random_condition

FIXTURES = Path(__file__).parent / "fixtures"

TOY = ModelConfig()
SMALL = ModelConfig(
    layers_face=1, layers_point=2, layers_coord=3, model_dim=32, heads=2,
    bins=16, draft_face=9, draft_point=3, draft_coord=2, condition_len=3,
)
MICRO = ModelConfig(
    layers_face=1, layers_point=1, layers_coord=1, model_dim=32, heads=2,
    bins=16, draft_face=9, draft_point=3, draft_coord=2, condition_len=3,
)


@pytest.fixture(scope="session")
def toy_model():
    return init_random(TOY, seed=0)


@pytest.fixture(scope="session")
def toy_condition():
    return random_condition(TOY, seed=0)


@pytest.fixture(scope="session")
def small_model():
    return init_random(SMALL, seed=0)


@pytest.fixture(scope="session")
def small_condition():
    return random_condition(SMALL, seed=0)


def make_canonical_mesh(rng: np.random.Generator, bins: int = 128,
                        n_faces: int = 6) -> QuantizedMesh:
    """Random quantized triangle mesh in canonical form."""
    n_verts = max(4, n_faces + 2)
    verts = rng.integers(0, bins, size=(n_verts, 3))
    faces = []
    while len(faces) < n_faces:
        f = rng.choice(n_verts, size=3, replace=False)
        tri = [tuple(verts[i]) for i in f]
        if len(set(tri)) == 3:  # drop faces degenerate in coordinates
            faces.append(f)
    qm = QuantizedMesh(verts, np.array(faces), bins)
    return canonicalize(qm)
