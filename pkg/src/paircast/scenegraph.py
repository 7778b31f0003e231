"""Directed road-agent graph construction.

Parses a plain-text map (a ``nodes`` table of id/x/y/kind rows and an
``edges`` table of src/dst/kind rows) into a RoadGraph, then combines
it with a scene sample into the graph the spatial encoders consume:

- road-road edges as listed in the map file
- one directed edge from every road node within ``radius`` meters of
  an agent's current position to that agent (map context flows into
  agents, never back)
- a complete directed agent-agent subgraph

Node features are (x, y, kind one-hot); edge features are an edge-type
one-hot (road-road, agent-agent, road-agent) followed by the 2-D offset
from source to destination. All positions in a SceneGraph are in the
scene-local frame of the sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .scenedata import SceneSample

ATTACH_RADIUS = 5.0
F_ROAD = 5   # x, y, one-hot kind (ring, arm, other)
F_EDGE = 5   # one-hot type (road-road, agent-agent, road-agent), dx, dy

_KIND_SLOT = {"ring": 0, "arm": 1}

EDGE_ROAD_ROAD = 0
EDGE_AGENT_AGENT = 1
EDGE_ROAD_AGENT = 2


@dataclass
class RoadGraph:
    """Static map graph; node order follows the file."""
    node_pos: np.ndarray    # [n_road, 2]
    node_feat: np.ndarray   # [n_road, F_ROAD]
    edges: np.ndarray       # [n_edges, 2] (src, dst) node indices
    edge_feat: np.ndarray   # [n_edges, F_EDGE]

    def __post_init__(self):
        self.node_pos = np.asarray(self.node_pos, dtype=np.float64)
        self.node_feat = np.asarray(self.node_feat, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_feat = np.asarray(self.edge_feat, dtype=np.float64).reshape(-1, F_EDGE)
        n = self.node_pos.shape[0]
        if n < 1:
            raise ValidationError("road graph requires at least one node")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValidationError(
                    f"edge endpoint out of range for {n} nodes")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValidationError("self-loop among road nodes")

    @property
    def n_nodes(self) -> int:
        return self.node_pos.shape[0]

    def shifted(self, offset) -> "RoadGraph":
        """The same graph with all positions translated by -offset."""
        offset = np.asarray(offset, dtype=np.float64)
        feat = self.node_feat.copy()
        feat[:, 0:2] -= offset
        return RoadGraph(self.node_pos - offset, feat, self.edges.copy(),
                         self.edge_feat.copy())


@dataclass
class SceneGraph:
    """Road graph plus agents of one scene, with typed directed edges."""
    road: RoadGraph
    agent_feat: np.ndarray          # [A, F_a] current-frame agent features
    agent_agent_edges: np.ndarray   # [A*(A-1), 2] ordered (src agent, dst agent)
    agent_road_edges: np.ndarray    # [K, 2] (agent, road node), flow road -> agent
    agent_agent_feat: np.ndarray    # [A*(A-1), F_EDGE]
    agent_road_feat: np.ndarray     # [K, F_EDGE]

    @property
    def n_agents(self) -> int:
        return self.agent_feat.shape[0]

    def merged_edges(self):
        """Unified (src, dst, feat) with road nodes first, agents appended.

        Agent i becomes node n_road + i. Order: road-road edges, then
        road-agent, then agent-agent; deterministic for fixed inputs.
        """
        nr = self.road.n_nodes
        srcs = [self.road.edges[:, 0]]
        dsts = [self.road.edges[:, 1]]
        feats = [self.road.edge_feat]
        if len(self.agent_road_edges):
            srcs.append(self.agent_road_edges[:, 1])
            dsts.append(self.agent_road_edges[:, 0] + nr)
            feats.append(self.agent_road_feat)
        if len(self.agent_agent_edges):
            srcs.append(self.agent_agent_edges[:, 0] + nr)
            dsts.append(self.agent_agent_edges[:, 1] + nr)
            feats.append(self.agent_agent_feat)
        return (np.concatenate(srcs).astype(np.int64),
                np.concatenate(dsts).astype(np.int64),
                np.concatenate(feats, axis=0))


def parse_road_graph(text: str, source: str = "<map>") -> RoadGraph:
    """Parse the nodes/edges table format; '#' starts a comment."""
    section = None
    nodes = {}
    order = []
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in ("nodes", "edges"):
            section = line
            continue
        parts = line.split()
        if section == "nodes":
            if len(parts) != 4:
                raise ParseError(f"{source}: line {lineno}: expected 'id x y kind'")
            try:
                nid = int(parts[0])
                x, y = float(parts[1]), float(parts[2])
            except ValueError as e:
                raise ParseError(f"{source}: line {lineno}: {e}") from None
            if nid in nodes:
                raise ValidationError(f"{source}: line {lineno}: duplicate node id {nid}")
            nodes[nid] = (x, y, parts[3])
            order.append(nid)
        elif section == "edges":
            if len(parts) != 3:
                raise ParseError(f"{source}: line {lineno}: expected 'src dst kind'")
            try:
                edges.append((int(parts[0]), int(parts[1]), lineno))
            except ValueError as e:
                raise ParseError(f"{source}: line {lineno}: {e}") from None
        else:
            raise ParseError(f"{source}: line {lineno}: content before a section header")

    if not nodes:
        raise ValidationError(f"{source}: no nodes")

    index = {nid: i for i, nid in enumerate(order)}
    node_pos = np.array([[nodes[nid][0], nodes[nid][1]] for nid in order])
    node_feat = np.zeros((len(order), F_ROAD))
    node_feat[:, 0:2] = node_pos
    for i, nid in enumerate(order):
        kind = nodes[nid][2]
        node_feat[i, 2 + _KIND_SLOT.get(kind, 2)] = 1.0

    pairs = []
    for src, dst, lineno in edges:
        if src not in index or dst not in index:
            raise ValidationError(
                f"{source}: line {lineno}: edge ({src}, {dst}) references a missing node")
        if src == dst:
            raise ValidationError(f"{source}: line {lineno}: self-loop on node {src}")
        pairs.append((index[src], index[dst]))
    edge_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    edge_feat = np.zeros((len(pairs), F_EDGE))
    if len(pairs):
        edge_feat[:, EDGE_ROAD_ROAD] = 1.0
        edge_feat[:, 3:5] = node_pos[edge_arr[:, 1]] - node_pos[edge_arr[:, 0]]
    return RoadGraph(node_pos, node_feat, edge_arr, edge_feat)


def build_road_graph(map_file) -> RoadGraph:
    """Load and parse a map file."""
    try:
        with open(map_file) as f:
            text = f.read()
    except OSError as e:
        raise ParseError(f"{map_file}: {e}") from None
    return parse_road_graph(text, source=str(map_file))


def empty_road_graph() -> RoadGraph:
    """A single far-away placeholder node, used when no map is given."""
    feat = np.zeros((1, F_ROAD))
    feat[:, 0] = 1e9
    feat[:, 2 + _KIND_SLOT.get("other", 2)] = 1.0
    return RoadGraph(np.array([[1e9, 1e9]]), feat, np.zeros((0, 2)), np.zeros((0, F_EDGE)))


def attach_agents(road: RoadGraph, sample: SceneSample,
                  radius: float = ATTACH_RADIUS) -> SceneGraph:
    """Connect a sample's agents to the map and to each other.

    Road positions are first translated into the sample's scene-local
    frame. An agent receives a directed edge from every road node at
    Euclidean distance <= radius from its current position; agents are
    fully connected among themselves (ordered pairs, no self-edges).
    """
    local = road.shifted(np.asarray(sample.origin, dtype=np.float64))
    pos = sample.current_positions()
    a = sample.n_agents

    aa = [(i, j) for i in range(a) for j in range(a) if i != j]
    aa_edges = np.array(aa, dtype=np.int64).reshape(-1, 2)
    aa_feat = np.zeros((len(aa), F_EDGE))
    aa_feat[:, EDGE_AGENT_AGENT] = 1.0
    aa_feat[:, 3:5] = pos[aa_edges[:, 1]] - pos[aa_edges[:, 0]]

    dists = np.linalg.norm(pos[:, None, :] - local.node_pos[None, :, :], axis=2)
    ai, vi = np.nonzero(dists <= radius)
    ar_edges = np.stack([ai, vi], axis=1).astype(np.int64) if len(ai) \
        else np.zeros((0, 2), dtype=np.int64)
    ar_feat = np.zeros((len(ai), F_EDGE))
    if len(ai):
        ar_feat[:, EDGE_ROAD_AGENT] = 1.0
        ar_feat[:, 3:5] = pos[ar_edges[:, 0]] - local.node_pos[ar_edges[:, 1]]

    return SceneGraph(
        road=local,
        agent_feat=sample.history[:, -1, :].copy(),
        agent_agent_edges=aa_edges,
        agent_road_edges=ar_edges,
        agent_agent_feat=aa_feat,
        agent_road_feat=ar_feat,
    )
