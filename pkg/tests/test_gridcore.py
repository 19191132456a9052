from __future__ import annotations

import numpy as np
import pytest

from gridcascade import fixtures
from gridcascade.gridcore import (
    DEMAND,
    NEUTRAL,
    SUPPLY,
    Grid,
    GridBalanceError,
    GridParseError,
    GridValidationError,
    Line,
    Node,
    TopologySpec,
    balance_check,
    component_labels,
    connected_components,
    load_grid,
    make_node,
    parse_grid,
    save_grid,
    serialize_grid,
)

SMALL = """\
# two generators feeding one load
node 0 0 0 supply 1.5
node 1 3 4 supply 0.5
node 2 6 0 demand 2
node 3 1 1 neutral
line 0 0 2 x=2 u=1.5
line 1 1 2 u=1
line 2 0 3
"""


def test_parse_small_grid():
    g = parse_grid(SMALL)
    assert g.n_nodes == 4 and g.n_lines == 3
    assert g.nodes[3].role == NEUTRAL
    np.testing.assert_allclose(g.supply, [1.5, 0.5, 0, 0])
    np.testing.assert_allclose(g.demand, [0, 0, 2, 0])
    # missing reactance falls back to the Euclidean length
    assert g.lines[1].reactance == pytest.approx(5.0)
    assert g.lines[2].capacity is None
    assert not g.has_capacities


def test_roundtrip_is_exact(tmp_path):
    g = fixtures.make_mring(3, capacity=0.5)
    p = tmp_path / "ring.grid"
    save_grid(g, p)
    g2 = load_grid(p)
    assert g2 == g
    assert serialize_grid(g2) == serialize_grid(g)


@pytest.mark.parametrize(
    "text, needle",
    [
        ("node 0 0 0 supply\n", ":1: supply needs exactly one value"),
        ("node 0 0 0 battery 1\n", "unknown role"),
        ("node 0 a 0 neutral\n", "expected a number"),
        ("node 0 0 0 neutral\nnode 0 1 1 neutral\n", ":2: duplicate node id"),
        ("edge 0 1 2\n", "unknown record type"),
        ("node 0 0 0 neutral\nnode 1 1 0 neutral\nline 0 0 1 r=3\n", ":3: bad line option"),
    ],
)
def test_parse_errors_carry_location(text, needle):
    with pytest.raises(GridParseError, match=needle):
        parse_grid(text, source="g.txt")


@pytest.mark.parametrize(
    "text, needle",
    [
        ("node 0 0 0 neutral\nnode 2 1 0 neutral\n", "dense"),
        ("node 0 0 0 neutral\nnode 1 1 0 neutral\nline 0 0 5\n", "missing node"),
        ("node 0 0 0 neutral\nline 0 0 0 x=1\n", "self-loop"),
        ("node 0 0 0 neutral\nnode 1 1 0 neutral\nline 0 0 1 x=-1\n", "reactance"),
        ("node 0 0 0 neutral\nnode 1 1 0 neutral\nline 0 0 1 x=1 u=-2\n", "capacity"),
        ("node 0 0 0 demand -1\n", "positive"),
    ],
)
def test_validation_errors(text, needle):
    with pytest.raises(GridValidationError, match=needle):
        parse_grid(text)


def test_zero_valued_roles_become_neutral():
    assert make_node(4, SUPPLY, 0.0).role == NEUTRAL
    assert make_node(4, DEMAND, 2.0).role == DEMAND


def test_unbalanced_grid_rejected_on_request():
    text = "node 0 0 0 supply 1\nnode 1 1 0 demand 2\nline 0 0 1 x=1\n"
    parse_grid(text)
    with pytest.raises(GridBalanceError):
        parse_grid(text, balanced=True)


def test_components_are_canonical():
    g = fixtures.make_mring(4)
    ncomp, labels = component_labels(g, g.alive_mask(removed=fixtures.tie_lines(4)))
    assert ncomp == 4
    # each area forms one island; numbering follows the smallest node id
    assert list(labels[:4]) == [0, 1, 2, 3]
    assert labels[4] == labels[5] == 0
    comps = connected_components(g, fixtures.area_failure(4, 1))
    assert [1] in comps
    assert all(c.balanced for c in balance_check(g, fixtures.tie_lines(4)))


def test_alive_mask_accepts_either_form():
    g = fixtures.make_mring(2)
    m = g.alive_mask(removed={0, 3})
    assert m.sum() == 8 and not m[0] and not m[3]
    np.testing.assert_array_equal(g.alive_mask(alive=np.flatnonzero(m)), m)
    with pytest.raises(ValueError):
        g.alive_mask(alive=m, removed={1})
    with pytest.raises(GridValidationError):
        g.alive_mask(removed={99})


def test_without_lines_renumbers():
    g = fixtures.make_mring(2)
    h = g.without_lines([0, 4])
    assert h.n_lines == 8
    assert [l.id for l in h.lines] == list(range(8))
    assert (h.lines[0].src, h.lines[0].dst) == (g.lines[1].src, g.lines[1].dst)


def test_derived_arrays_are_read_only():
    g = fixtures.make_mring(2)
    with pytest.raises(ValueError):
        g.demand[0] = 5.0


def test_topology_spec_checks():
    TopologySpec("mring", 2)
    with pytest.raises(GridValidationError):
        TopologySpec("mring", 1)
    with pytest.raises(GridValidationError):
        TopologySpec("qgraph", 2)
    with pytest.raises(GridValidationError):
        TopologySpec("torus", 3)


def test_with_capacities_length_checked():
    g = Grid((Node(0, SUPPLY, 1.0), Node(1, DEMAND, 1.0, 1.0)), (Line(0, 0, 1, 1.0),))
    assert g.with_capacities([0.3]).capacity[0] == 0.3
    with pytest.raises(GridValidationError):
        g.with_capacities([1.0, 2.0])
