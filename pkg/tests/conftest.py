import numpy as np
import pytest

from cellmp.cells import build_complex
from cellmp.datagen import GeometricGraph


@pytest.fixture
def triangle_graph():
    return GeometricGraph(
        positions=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        edges=[(0, 1), (1, 2), (0, 2)],
    )


@pytest.fixture
def filled_triangle(triangle_graph):
    return build_complex(triangle_graph, [[0, 1, 2]])


@pytest.fixture
def unit_square_ring():
    graph = GeometricGraph(
        positions=np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
        edges=[(0, 1), (1, 2), (2, 3), (0, 3)],
    )
    return graph, build_complex(graph, [[0, 1, 2, 3]])


def transform_points(points, t):
    return np.asarray(points) @ t.rotation.T + t.translation
