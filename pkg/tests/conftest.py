"""Shared fixtures: small deterministic graphs and model configurations."""

import numpy as np
import pytest

from gt3lab.graphdata import Dataset, Graph
from gt3lab.models import GnnConfig, init_params
from gt3lab.tensor import DenseMatrix


@pytest.fixture
def fixture_graph():
    """Five nodes, six edges, two attribute columns; the gradient fixture."""
    return Graph(
        num_nodes=5,
        edges=((0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)),
        attributes=DenseMatrix.from_array(
            np.random.default_rng(3).normal(size=(5, 2))
        ),
        label=1,
    )


@pytest.fixture
def fixture_cfg():
    return GnnConfig(
        arch="gcn",
        num_layers=2,
        hidden_dim=3,
        shared_layers=1,
        num_classes=2,
        attr_dim=2,
    )


@pytest.fixture
def fixture_params(fixture_cfg):
    return init_params(fixture_cfg, seed=7)


@pytest.fixture
def path3():
    """Path graph 0-1-2 with 2-d attributes."""
    return Graph(
        num_nodes=3,
        edges=((0, 1), (1, 2)),
        attributes=DenseMatrix.from_array([[1.0, 0.0], [2.0, 1.0], [3.0, 0.0]]),
        label=0,
    )


@pytest.fixture
def triangle():
    return Graph(
        num_nodes=3,
        edges=((0, 1), (0, 2), (1, 2)),
        attributes=DenseMatrix.ones(3, 1),
        label=0,
    )


@pytest.fixture
def star4():
    """Star with hub 0 and three leaves."""
    return Graph(
        num_nodes=4,
        edges=((0, 1), (0, 2), (0, 3)),
        attributes=DenseMatrix.ones(4, 1),
        label=1,
    )


@pytest.fixture
def edgeless():
    return Graph(
        num_nodes=2,
        edges=(),
        attributes=DenseMatrix.from_array([[1.0], [2.0]]),
        label=0,
    )


def make_sized_dataset(sizes, attr_dim=1, num_classes=2):
    """Path graphs with the given node counts, labels alternating."""
    graphs = []
    for i, n in enumerate(sizes):
        edges = tuple((j, j + 1) for j in range(n - 1))
        graphs.append(
            Graph(
                num_nodes=n,
                edges=edges,
                attributes=DenseMatrix.ones(n, attr_dim),
                label=i % num_classes,
            )
        )
    return Dataset(name="sized", graphs=tuple(graphs), num_classes=num_classes)


@pytest.fixture
def sized_dataset_factory():
    return make_sized_dataset
