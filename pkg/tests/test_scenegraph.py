"""Map parsing and scene-graph assembly."""

import numpy as np
import pytest

from paircast.errors import ParseError, ValidationError
from paircast.scenedata import (F_AGENT, T_HIST, SceneSample, SynthConfig,
                                roundabout_map_text)
from paircast.scenegraph import (ATTACH_RADIUS, EDGE_AGENT_AGENT,
                                 EDGE_ROAD_AGENT, EDGE_ROAD_ROAD, F_EDGE,
                                 F_ROAD, RoadGraph, attach_agents,
                                 empty_road_graph, parse_road_graph)

CHAIN = """\
nodes
0 0.0 0.0 ring
1 1.0 0.0 ring
2 2.0 0.0 arm
edges
0 1 road
1 2 road
"""


def make_sample(positions, ids=None, origin=(0.0, 0.0)):
    """Fully-valid sample with agents standing at the given current positions."""
    pos = np.asarray(positions, dtype=np.float64)
    a = pos.shape[0]
    t_f = 15
    history = np.zeros((a, T_HIST, F_AGENT))
    history[:, :, 0:2] = pos[:, None, :]
    return SceneSample(
        agent_ids=list(ids) if ids is not None else list(range(1, a + 1)),
        history=history,
        future_gt=np.tile(pos[:, None, :], (1, t_f, 1)),
        valid_mask=np.ones((a, T_HIST + t_f), dtype=bool),
        ego_index=0,
        map_ref="",
        origin=np.asarray(origin, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# parsing


def test_three_node_chain():
    g = parse_road_graph(CHAIN)
    assert g.n_nodes == 3
    assert g.edges.shape == (2, 2)
    assert np.allclose(g.node_pos, [[0, 0], [1, 0], [2, 0]])
    # kind one-hot: slots (ring, arm, other) after the position
    assert np.array_equal(g.node_feat[:, 2:5], [[1, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert np.all(g.edge_feat[:, EDGE_ROAD_ROAD] == 1.0)
    assert np.allclose(g.edge_feat[:, 3:5], [[1, 0], [1, 0]])


def test_edge_to_missing_node_rejected():
    with pytest.raises(ValidationError):
        parse_road_graph("nodes\n0 0 0 ring\nedges\n0 99 road\n")


def test_duplicate_node_id_rejected():
    with pytest.raises(ValidationError):
        parse_road_graph("nodes\n0 0 0 ring\n0 1 1 ring\n")


def test_self_loop_rejected():
    with pytest.raises(ValidationError):
        parse_road_graph("nodes\n0 0 0 ring\n1 1 0 ring\nedges\n1 1 road\n")


def test_malformed_line_reports_number():
    with pytest.raises(ParseError) as exc:
        parse_road_graph("nodes\n0 0.0 0.0 ring\n1 oops 0.0 ring\n")
    assert "line 3" in str(exc.value)


def test_content_before_section_rejected():
    with pytest.raises(ParseError):
        parse_road_graph("0 0 0 ring\n")


def test_comments_and_blank_lines_ignored():
    text = "# map\nnodes\n\n0 0 0 ring  # origin\n1 1 0 arm\nedges\n0 1 road\n"
    g = parse_road_graph(text)
    assert g.n_nodes == 2 and len(g.edges) == 1


def test_generated_ring_map_structure():
    text = roundabout_map_text(SynthConfig(ring_radius=10.0, entry_arms=3),
                               arm_length=25.0)
    g = parse_road_graph(text)
    ring = np.nonzero(g.node_feat[:, 2] == 1.0)[0]
    assert len(ring) == 63
    assert np.array_equal(ring, np.arange(63))
    # ring nodes sit on the circle and form a closed chain
    assert np.allclose(np.linalg.norm(g.node_pos[ring], axis=1), 10.0, atol=1e-5)
    edge_set = {tuple(e) for e in g.edges}
    for i in range(63):
        assert (i, (i + 1) % 63) in edge_set
    # every arm node reaches the ring by following edges
    # arms: 1 m sampling to 15 m, then 3 m steps at 18, 21, 24
    n_arm = int((g.node_feat[:, 3] == 1.0).sum())
    assert n_arm == 3 * 18
    out = {}
    for s, d in g.edges:
        out.setdefault(int(s), []).append(int(d))
    for start in np.nonzero(g.node_feat[:, 3] == 1.0)[0]:
        seen, cur = set(), int(start)
        while g.node_feat[cur, 2] != 1.0:
            assert cur not in seen
            seen.add(cur)
            nxt = [d for d in out.get(cur, []) if d not in seen]
            assert nxt, f"arm node {cur} has no outgoing path"
            cur = nxt[0]


# ---------------------------------------------------------------------------
# attachment


def test_graph_validation():
    with pytest.raises(ValidationError):
        RoadGraph(np.zeros((0, 2)), np.zeros((0, F_ROAD)),
                  np.zeros((0, 2)), np.zeros((0, F_EDGE)))
    with pytest.raises(ValidationError):
        RoadGraph(np.zeros((2, 2)), np.zeros((2, F_ROAD)),
                  np.array([[0, 5]]), np.zeros((1, F_EDGE)))


def test_full_agent_agent_graph():
    g = attach_agents(parse_road_graph(CHAIN), make_sample([[0, 50], [1, 50], [2, 50]]))
    assert g.agent_agent_edges.shape == (6, 2)
    pairs = {tuple(e) for e in g.agent_agent_edges}
    assert pairs == {(i, j) for i in range(3) for j in range(3) if i != j}
    assert np.all(g.agent_agent_feat[:, EDGE_AGENT_AGENT] == 1.0)
    # offsets are destination minus source, hence antisymmetric
    lookup = {tuple(e): f[3:5] for e, f in zip(g.agent_agent_edges, g.agent_agent_feat)}
    for (i, j), off in lookup.items():
        assert np.allclose(off, -lookup[(j, i)])


def test_attach_radius_boundary():
    road = RoadGraph(np.array([[5.0, 0.0], [5.01, 40.0]]),
                     np.zeros((2, F_ROAD)), np.zeros((0, 2)), np.zeros((0, F_EDGE)))
    sample = make_sample([[0.0, 0.0], [0.0, 40.0]])
    g = attach_agents(road, sample, radius=5.0)
    assert {tuple(e) for e in g.agent_road_edges} == {(0, 0)}
    assert np.all(g.agent_road_feat[:, EDGE_ROAD_AGENT] == 1.0)
    assert np.allclose(g.agent_road_feat[0, 3:5], [-5.0, 0.0])


def test_attach_matches_brute_force_scan():
    rng = np.random.default_rng(17)
    node_pos = rng.uniform(-12, 12, size=(40, 2))
    road = RoadGraph(node_pos, np.zeros((40, F_ROAD)),
                     np.zeros((0, 2)), np.zeros((0, F_EDGE)))
    agents = rng.uniform(-12, 12, size=(6, 2))
    g = attach_agents(road, make_sample(agents))
    got = {tuple(e) for e in g.agent_road_edges}
    expected = {(a, v)
                for a in range(6) for v in range(40)
                if np.linalg.norm(agents[a] - node_pos[v]) <= ATTACH_RADIUS}
    assert got == expected


def test_world_translation_invariance():
    shift = np.array([32.0, -8.0])
    rng = np.random.default_rng(4)
    node_pos = rng.uniform(-10, 10, size=(12, 2))
    agents = rng.uniform(-6, 6, size=(3, 2))
    road_a = RoadGraph(node_pos, np.zeros((12, F_ROAD)),
                       np.zeros((0, 2)), np.zeros((0, F_EDGE)))
    road_b = RoadGraph(node_pos + shift, np.zeros((12, F_ROAD)),
                       np.zeros((0, 2)), np.zeros((0, F_EDGE)))
    ga = attach_agents(road_a, make_sample(agents))
    gb = attach_agents(road_b, make_sample(agents, origin=shift))
    assert np.array_equal(ga.agent_road_edges, gb.agent_road_edges)
    assert np.allclose(ga.agent_road_feat, gb.agent_road_feat, atol=1e-12)
    assert np.allclose(ga.road.node_pos, gb.road.node_pos, atol=1e-12)


def test_agent_permutation_isomorphism():
    rng = np.random.default_rng(8)
    node_pos = rng.uniform(-8, 8, size=(10, 2))
    road = RoadGraph(node_pos, np.zeros((10, F_ROAD)),
                     np.zeros((0, 2)), np.zeros((0, F_EDGE)))
    agents = rng.uniform(-6, 6, size=(4, 2))
    perm = [2, 0, 3, 1]  # agents of b in permuted order
    ga = attach_agents(road, make_sample(agents, ids=[1, 2, 3, 4]))
    gb = attach_agents(road, make_sample(agents[perm], ids=[10, 20, 30, 40]))

    def edge_key(g, perm_map):
        keys = set()
        src, dst, feat = g.merged_edges()
        nr = g.road.n_nodes
        for s, d, f in zip(src, dst, feat):
            s = ("road", int(s)) if s < nr else ("agent", perm_map[int(s) - nr])
            d = ("road", int(d)) if d < nr else ("agent", perm_map[int(d) - nr])
            keys.add((s, d, tuple(np.round(f, 9))))
        return keys

    ident = {i: i for i in range(4)}
    to_orig = {b_idx: orig for b_idx, orig in enumerate(perm)}
    assert edge_key(ga, ident) == edge_key(gb, to_orig)


def test_merged_edges_indexing():
    g = attach_agents(parse_road_graph(CHAIN), make_sample([[0.5, 0.0], [0.5, 100.0]]))
    src, dst, feat = g.merged_edges()
    nr = g.road.n_nodes
    n_rr = len(g.road.edges)
    n_ra = len(g.agent_road_edges)
    assert len(src) == n_rr + n_ra + len(g.agent_agent_edges)
    assert np.all(src[:n_rr] < nr) and np.all(dst[:n_rr] < nr)
    assert np.all(src[n_rr:n_rr + n_ra] < nr)
    assert np.all(dst[n_rr:n_rr + n_ra] >= nr)
    assert np.all(src[n_rr + n_ra:] >= nr) and np.all(dst[n_rr + n_ra:] >= nr)
    types = np.argmax(feat[:, 0:3], axis=1)
    assert np.all(types[:n_rr] == EDGE_ROAD_ROAD)
    assert np.all(types[n_rr:n_rr + n_ra] == EDGE_ROAD_AGENT)
    assert np.all(types[n_rr + n_ra:] == EDGE_AGENT_AGENT)
    # agent 0 stands within radius of all three chain nodes, agent 1 of none
    assert {tuple(e) for e in g.agent_road_edges} == {(0, 0), (0, 1), (0, 2)}


def test_empty_road_graph_attaches_nothing():
    g = attach_agents(empty_road_graph(), make_sample([[0, 0], [3, 3]]))
    assert len(g.agent_road_edges) == 0
    assert g.agent_agent_edges.shape == (2, 2)
