import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from data_models import MaterialModel, RegionLabels
from mesh_processor import MeshProcessor


def top_bottom_labels(mesh, axis: int = 2) -> RegionLabels:
    """matching and loaded on the max face, fixed on the min face"""
    top = MeshProcessor.select_region(mesh, MeshProcessor.plane_predicate(mesh, axis, "max"))
    bottom = MeshProcessor.select_region(mesh, MeshProcessor.plane_predicate(mesh, axis, "min"))
    return RegionLabels(matching=top, loaded=top, fixed=MeshProcessor.region_vertices(mesh, bottom))


@pytest.fixture
def unit_cube():
    return MeshProcessor.generate_box_mesh(2, 2, 2)


@pytest.fixture
def small_box():
    """4x4x4 cells over a 10 cm cube, 125 vertices"""
    return MeshProcessor.generate_box_mesh(4, 4, 4, (0.1, 0.1, 0.1))


@pytest.fixture
def small_box_labels(small_box):
    return top_bottom_labels(small_box)


@pytest.fixture
def linear_material():
    return MaterialModel("linear", 1.0, 0.4)


@pytest.fixture
def svk_material():
    return MaterialModel("svk", 1.0, 0.4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
