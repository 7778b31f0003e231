"""Track ingest and scene windowing.

This module:
- loads track CSVs (``track_id,frame,x,y,heading,speed[,class]``) into
  per-agent arrays, validating the contiguous integer frame model
- synthesizes interacting roundabout traffic as a license-free dataset
  substitute: circulating agents on a ring, entering agents on radial
  arms that yield under a gap-acceptance rule, with yield events
  recorded as interaction labels
- windows tracks into fixed-shape scene samples (1 s of history at
  5 Hz plus a 3 s or 5 s future), expressed in a scene-local frame
- round-trips tracks and labels through CSV with full float precision

Agent features per step are (x_rel, y_rel, cos heading, sin heading,
speed, vehicle one-hot, pedestrian one-hot) relative to the scene's
current-frame centroid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

DT = 0.2                  # 5 Hz sampling
T_HIST = 5                # 1 s of history
FUTURE_STEPS = (15, 25)   # 3 s and 5 s horizons
MAX_AGENTS = 25
F_AGENT = 7

_VEHICLE_CLASSES = {"car", "van", "truck", "bus", "motorcycle", "trailer", "truck_bus"}
_PEDESTRIAN_CLASSES = {"pedestrian", "bicycle"}


@dataclass
class TrackPoint:
    """One sampled trajectory point of one agent."""
    track_id: int
    frame: int
    x: float
    y: float
    heading: float
    speed: float


@dataclass
class Track:
    """A contiguous trajectory: frames strictly increase by one."""
    track_id: int
    frames: np.ndarray
    xy: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    agent_class: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64)
        self.heading = np.asarray(self.heading, dtype=np.float64)
        self.speed = np.asarray(self.speed, dtype=np.float64)
        if len(self.frames) == 0:
            raise ValidationError(f"track {self.track_id}: empty")
        if np.any(np.diff(self.frames) != 1):
            raise ValidationError(
                f"track {self.track_id}: frames must strictly increase by 1")
        if np.any(self.speed < 0.0):
            raise ValidationError(f"track {self.track_id}: negative speed")

    @property
    def first_frame(self) -> int:
        return int(self.frames[0])

    @property
    def last_frame(self) -> int:
        return int(self.frames[-1])

    def covers(self, lo: int, hi: int) -> bool:
        return self.first_frame <= lo and hi <= self.last_frame

    def at(self, frame: int) -> int:
        return frame - self.first_frame

    def class_onehot(self) -> np.ndarray:
        cls = (self.agent_class or "").lower()
        return np.array([
            1.0 if cls in _VEHICLE_CLASSES else 0.0,
            1.0 if cls in _PEDESTRIAN_CLASSES else 0.0,
        ])


@dataclass
class SceneSample:
    """One fixed-shape prediction instance in a scene-local frame."""
    agent_ids: list
    history: np.ndarray      # [A, T_HIST, F_AGENT]
    future_gt: np.ndarray    # [A, t_f, 2]
    valid_mask: np.ndarray   # [A, T_HIST + t_f]
    ego_index: int
    map_ref: str
    anchor_frame: int = 0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        a = len(self.agent_ids)
        if not 2 <= a <= MAX_AGENTS:
            raise ValidationError(f"scene requires 2..{MAX_AGENTS} agents, got {a}")
        if not 0 <= self.ego_index < a:
            raise ValidationError(f"ego_index {self.ego_index} out of range for {a} agents")
        if self.history.shape[0] != a or self.future_gt.shape[0] != a:
            raise ValidationError("agent axis mismatch between ids and arrays")
        if not np.all(self.valid_mask[:, T_HIST - 1]):
            raise ValidationError("every agent must be valid at the current frame")

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def t_f(self) -> int:
        return self.future_gt.shape[1]

    @property
    def hist_mask(self) -> np.ndarray:
        return self.valid_mask[:, :T_HIST]

    @property
    def future_mask(self) -> np.ndarray:
        return self.valid_mask[:, T_HIST:]

    def current_positions(self) -> np.ndarray:
        return self.history[:, -1, 0:2]


# ---------------------------------------------------------------------------
# CSV I/O


def load_tracks(csv_path, frame_stride: int = 1):
    """Load a track CSV into ``Track`` objects sorted by id.

    ``frame_stride`` > 1 downsamples a higher-rate file by index
    striding (no interpolation); kept rows are re-indexed so frames
    stay contiguous.
    """
    rows = []
    try:
        f = open(csv_path, newline="")
    except OSError as e:
        raise ParseError(f"{csv_path}: {e}") from None
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{csv_path}: empty file") from None
        header = [h.strip() for h in header]
        col = {name: i for i, name in enumerate(header)}
        for required in ("track_id", "frame", "x", "y"):
            if required not in col:
                raise ParseError(f"{csv_path}: header misses column {required!r}")
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            try:
                tid = int(raw[col["track_id"]])
                frame = int(raw[col["frame"]])
                x = float(raw[col["x"]])
                y = float(raw[col["y"]])
                heading = float(raw[col["heading"]]) if "heading" in col else 0.0
                speed = float(raw[col["speed"]]) if "speed" in col else 0.0
            except (ValueError, IndexError) as e:
                raise ParseError(f"{csv_path}: line {lineno}: {e}") from None
            cls = raw[col["class"]].strip() if "class" in col and len(raw) > col["class"] else None
            rows.append((tid, frame, x, y, heading, speed, cls))

    rows.sort(key=lambda r: (r[0], r[1]))
    tracks = []
    i = 0
    while i < len(rows):
        tid = rows[i][0]
        j = i
        while j < len(rows) and rows[j][0] == tid:
            j += 1
        group = rows[i:j]
        if frame_stride > 1:
            group = [r for r in group if r[1] % frame_stride == 0]
            group = [(r[0], r[1] // frame_stride, *r[2:]) for r in group]
        if group:
            tracks.append(Track(
                track_id=tid,
                frames=[r[1] for r in group],
                xy=[(r[2], r[3]) for r in group],
                heading=[r[4] for r in group],
                speed=[r[5] for r in group],
                agent_class=group[0][6],
            ))
        i = j
    return tracks


def write_tracks(path, tracks):
    """Write tracks in the loader's schema; floats keep full precision."""
    has_class = any(t.agent_class for t in tracks)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["track_id", "frame", "x", "y", "heading", "speed"]
        if has_class:
            header.append("class")
        w.writerow(header)
        for t in sorted(tracks, key=lambda t: t.track_id):
            for i, frame in enumerate(t.frames):
                row = [t.track_id, int(frame), repr(float(t.xy[i, 0])), repr(float(t.xy[i, 1])),
                       repr(float(t.heading[i])), repr(float(t.speed[i]))]
                if has_class:
                    row.append(t.agent_class or "")
                w.writerow(row)


def load_labels(path):
    """Read interaction labels: rows of (frame, agent_a, agent_b, label)."""
    out = []
    try:
        f = open(path, newline="")
    except OSError as e:
        raise ParseError(f"{path}: {e}") from None
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            return out
        if [h.strip() for h in header] != ["frame", "agent_a", "agent_b", "label"]:
            raise ParseError(f"{path}: unexpected label header {header}")
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            try:
                out.append((int(raw[0]), int(raw[1]), int(raw[2]), int(raw[3])))
            except (ValueError, IndexError) as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from None
    return out


def write_labels(path, labels):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "agent_a", "agent_b", "label"])
        for frame, a, b, label in labels:
            w.writerow([int(frame), int(a), int(b), int(label)])


def interacting_pairs(labels, frame_lo: int, frame_hi: int):
    """Unordered id pairs with a positive label inside [frame_lo, frame_hi]."""
    pairs = set()
    for frame, a, b, label in labels:
        if label == 1 and frame_lo <= frame <= frame_hi:
            pairs.add(frozenset((a, b)))
    return pairs


# ---------------------------------------------------------------------------
# synthetic roundabout traffic

V_RING = 6.0        # nominal circulating speed, m/s
V_ENTRY = 6.0       # approach target speed, m/s
ACCEL = 2.0         # m/s^2
BRAKE = 3.5         # m/s^2
YIELD_ZONE = 8.0    # gap checking starts this close to the merge point, m
STOP_LINE = 1.5     # holding position short of the merge point, m
FOLLOW_GAP = 4.0    # minimum spacing between queued entering agents, m
SPEED_TAU = 2.0     # s, relaxation time of circulating speed toward V_RING
SPEED_JITTER = 0.4  # m/s, per-frame speed perturbation of circulating agents
V_CIRC_MIN = 3.0    # m/s, circulating speed bounds
V_CIRC_MAX = 9.0
MERGE_MARGIN = 0.5  # s, a yielding agent aims to merge this long after its blocker


@dataclass
class SynthConfig:
    """Parameters of the synthetic roundabout generator."""
    n_agents: int = 8
    ring_radius: float = 10.0
    entry_arms: int = 3
    gap_accept_s: float = 3.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_agents <= MAX_AGENTS:
            raise ValidationError(f"n_agents must be in [2, {MAX_AGENTS}], got {self.n_agents}")
        if self.ring_radius <= 0.0:
            raise ValidationError("ring_radius must be > 0")
        if self.entry_arms < 1:
            raise ValidationError("entry_arms must be >= 1")
        if self.gap_accept_s < 0.0 or self.noise_std < 0.0:
            raise ValidationError("gap_accept_s and noise_std must be >= 0")


@dataclass
class _SimState:
    """Mutable kinematic state of every agent at one frame."""
    circulating: list
    theta: np.ndarray
    arm_angle: np.ndarray
    dist: np.ndarray
    speed: np.ndarray

    def copy(self) -> "_SimState":
        return _SimState(list(self.circulating), self.theta.copy(),
                         self.arm_angle.copy(), self.dist.copy(), self.speed.copy())


def _sim_init(cfg: SynthConfig, rng) -> _SimState:
    # circulating agents carry an angle, entering agents a
    # distance-to-merge along their arm
    n = cfg.n_agents
    n_circ = max(1, n // 4)
    n_entry = n - n_circ
    circulating = [True] * n_circ + [False] * n_entry
    theta = np.zeros(n)
    arm_angle = np.zeros(n)
    dist = np.zeros(n)
    speed = np.zeros(n)

    spacing = 2.0 * math.pi / max(n_circ, 1)
    for i in range(n_circ):
        theta[i] = i * spacing + rng.uniform(0.0, 0.25 * spacing)
        speed[i] = V_RING
    for j in range(n_entry):
        k = n_circ + j
        arm_angle[k] = 2.0 * math.pi * (j % cfg.entry_arms) / cfg.entry_arms
        dist[k] = 10.0 + 25.0 * j + rng.uniform(0.0, 3.0)
        speed[k] = V_ENTRY
    return _SimState(circulating, theta, arm_angle, dist, speed)


def _sim_pose(state: _SimState, i: int, cfg: SynthConfig):
    """World position and heading of agent ``i``."""
    if state.circulating[i]:
        return (cfg.ring_radius * math.cos(state.theta[i]),
                cfg.ring_radius * math.sin(state.theta[i]),
                state.theta[i] + 0.5 * math.pi)
    r = cfg.ring_radius + state.dist[i]
    return (r * math.cos(state.arm_angle[i]),
            r * math.sin(state.arm_angle[i]),
            state.arm_angle[i] + math.pi)


def _sim_advance(state: _SimState, cfg: SynthConfig, jitter_row, frame: int, labels):
    """Advance every agent by one frame, appending yield conflicts to labels."""
    n = cfg.n_agents
    radius = cfg.ring_radius
    circulating = state.circulating
    theta, arm_angle = state.theta, state.arm_angle
    dist, speed = state.dist, state.speed

    for i in range(n):
        if circulating[i]:
            pull = (V_RING - speed[i]) * (DT / SPEED_TAU)
            pull = min(ACCEL * DT, max(-BRAKE * DT, pull))
            speed[i] = speed[i] + pull + jitter_row[i]
            speed[i] = min(V_CIRC_MAX, max(V_CIRC_MIN, speed[i]))
            theta[i] = (theta[i] + speed[i] / radius * DT) % (2.0 * math.pi)
            continue

        # yield while any circulating agent would reach the merge point
        # too soon; track the latest blocker so the merge slots in right
        # behind it; once past the stop line the merge is committed and
        # the agent accelerates through
        yielding = False
        t_block = 0.0
        if STOP_LINE <= dist[i] <= YIELD_ZONE:
            for u in range(n):
                if not circulating[u]:
                    continue
                gap_angle = (arm_angle[i] - theta[u]) % (2.0 * math.pi)
                t_arrive = gap_angle * radius / max(speed[u], 0.1)
                if t_arrive < cfg.gap_accept_s:
                    yielding = True
                    t_block = max(t_block, t_arrive)
                    labels.append((frame, i, u, 1))
        queued = any(
            (not circulating[u]) and u != i
            and arm_angle[u] == arm_angle[i]
            and dist[u] < dist[i]
            and dist[i] - dist[u] < FOLLOW_GAP
            for u in range(n))

        if queued:
            speed[i] = max(0.0, speed[i] - BRAKE * DT)
        elif yielding:
            # approach the stop line timed to the blocker's passage, so the
            # hold position keeps tracking the blocker instead of parking
            target = min(V_ENTRY, (dist[i] - STOP_LINE) / (t_block + MERGE_MARGIN))
            if speed[i] > target:
                speed[i] = max(target, speed[i] - BRAKE * DT)
            else:
                speed[i] = min(target, speed[i] + ACCEL * DT)
        else:
            speed[i] = min(V_ENTRY, speed[i] + ACCEL * DT)
        dist[i] -= speed[i] * DT
        if dist[i] <= 0.0:
            circulating[i] = True
            theta[i] = (arm_angle[i] - dist[i] / radius) % (2.0 * math.pi)


def synth_roundabout(cfg: SynthConfig, n_frames: int = 240):
    """Deterministic synthetic tracks for a fixed seed."""
    tracks, _ = synth_roundabout_labeled(cfg, n_frames)
    return tracks


def synth_roundabout_labeled(cfg: SynthConfig, n_frames: int = 240):
    """Tracks plus per-frame interaction labels for gap-acceptance yields.

    Roughly half the agents circulate the ring, each with its own
    persistent random speed fluctuation around the nominal ring speed;
    the rest approach along radial arms and merge. An approaching agent
    inside the yield zone yields while any circulating agent would
    reach its merge point within ``gap_accept_s`` seconds — it slows to
    a creep speed that tracks the blocking agent's time to merge, so
    the pair's futures stay coupled — and each such conflict is
    recorded as a (frame, enterer, circulator, 1) label.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_agents
    state = _sim_init(cfg, rng)

    xs = np.zeros((n, n_frames))
    ys = np.zeros((n, n_frames))
    hs = np.zeros((n, n_frames))
    vs = np.zeros((n, n_frames))
    jitter = rng.normal(0.0, SPEED_JITTER, size=(n_frames, n))
    labels = []

    for frame in range(n_frames):
        for i in range(n):
            xs[i, frame], ys[i, frame], hs[i, frame] = _sim_pose(state, i, cfg)
            vs[i, frame] = state.speed[i]
        _sim_advance(state, cfg, jitter[frame], frame, labels)

    tracks = []
    for i in range(n):
        noise = rng.normal(0.0, cfg.noise_std, size=(n_frames, 2)) if cfg.noise_std > 0 \
            else np.zeros((n_frames, 2))
        tracks.append(Track(
            track_id=i,
            frames=np.arange(n_frames),
            xy=np.stack([xs[i] + noise[:, 0], ys[i] + noise[:, 1]], axis=1),
            heading=hs[i],
            speed=vs[i],
            agent_class="car",
        ))
    return tracks, labels


def roundabout_map_text(cfg: SynthConfig, arm_length: float | None = None) -> str:
    """Road map for the generator's geometry: a closed ring plus radial arms.

    The ring is sampled at 1 m arc length (floor(2 pi r) nodes) with
    consecutive-node edges; each entry arm is a chain from the ring
    outward, sampled at 1 m for the first 15 m and 3 m beyond that. By
    default each arm is long enough to cover the farthest entry spawn
    position used by the generator.
    """
    if arm_length is None:
        n_entry = cfg.n_agents - max(1, cfg.n_agents // 4)
        arm_length = 15.0 + 25.0 * max(0, n_entry - 1)
    lines = ["nodes"]
    # nodes at arc positions 0,1,2,... m around the circumference
    n_ring = math.ceil(2.0 * math.pi * cfg.ring_radius - 1e-9)
    node_id = 0
    for i in range(n_ring):
        ang = 2.0 * math.pi * i / n_ring
        lines.append(f"{node_id} {cfg.ring_radius * math.cos(ang):.6f} "
                     f"{cfg.ring_radius * math.sin(ang):.6f} ring")
        node_id += 1
    near = min(int(arm_length), 15)
    samples_out = list(range(1, near + 1)) + list(range(near + 3,
                                                       int(arm_length) + 1, 3))
    arm_nodes = []
    for k in range(cfg.entry_arms):
        ang = 2.0 * math.pi * k / cfg.entry_arms
        ids = []
        for s in samples_out:
            r = cfg.ring_radius + s
            lines.append(f"{node_id} {r * math.cos(ang):.6f} {r * math.sin(ang):.6f} arm")
            ids.append(node_id)
            node_id += 1
        arm_nodes.append(ids)
    lines.append("edges")
    for i in range(n_ring):
        lines.append(f"{i} {(i + 1) % n_ring} road")
    for ids in arm_nodes:
        chain = list(reversed(ids))  # outermost first, pointing toward the ring
        for a, b in zip(chain[:-1], chain[1:]):
            lines.append(f"{a} {b} road")
        # the innermost arm node connects to the closest ring node
        inner = ids[0]
        lines.append(f"{inner} {_closest_ring_node(lines, n_ring, inner)} road")
    return "\n".join(lines) + "\n"


def _closest_ring_node(lines, n_ring, node_id):
    # node lines start at index 1 ("nodes" marker first)
    def pos(nid):
        parts = lines[1 + nid].split()
        return float(parts[1]), float(parts[2])

    x, y = pos(node_id)
    best, best_d = 0, float("inf")
    for i in range(n_ring):
        xi, yi = pos(i)
        d = (xi - x) ** 2 + (yi - y) ** 2
        if d < best_d:
            best, best_d = i, d
    return best


# ---------------------------------------------------------------------------
# windowing


def window_scenes(tracks, t_h: int = T_HIST, t_f: int = 15, stride: int = 1,
                  map_ref: str = ""):
    """Slide fixed windows over the shared frame axis and emit scene samples.

    A window anchored at current frame c spans frames [c-t_h+1, c+t_f].
    It is emitted iff at least two agents are valid over the whole
    window; agents valid at c but absent elsewhere are included with
    their invalid steps masked. Positions are re-expressed relative to
    the current-frame centroid of the included agents.
    """
    if t_h != T_HIST:
        raise ValidationError(f"t_h must be {T_HIST} (1 s at 5 Hz), got {t_h}")
    if t_f not in FUTURE_STEPS:
        raise ValidationError(f"t_f must be one of {FUTURE_STEPS}, got {t_f}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if not tracks:
        return []

    lo = min(t.first_frame for t in tracks)
    hi = max(t.last_frame for t in tracks)
    samples = []
    for anchor in range(lo + t_h - 1, hi - t_f + 1, stride):
        w_lo, w_hi = anchor - t_h + 1, anchor + t_f
        full = [t for t in tracks if t.covers(w_lo, w_hi)]
        if len(full) < 2:
            continue
        present = [t for t in tracks if t.first_frame <= anchor <= t.last_frame]
        if len(present) > MAX_AGENTS:
            centroid = np.mean([t.xy[t.at(anchor)] for t in present], axis=0)
            full_ids = {t.track_id for t in full}

            def rank(t):
                d = float(np.linalg.norm(t.xy[t.at(anchor)] - centroid))
                return (t.track_id not in full_ids, d, t.track_id)

            present = sorted(present, key=rank)[:MAX_AGENTS]
        present = sorted(present, key=lambda t: t.track_id)

        a = len(present)
        origin = np.mean([t.xy[t.at(anchor)] for t in present], axis=0)
        history = np.zeros((a, t_h, F_AGENT))
        future = np.zeros((a, t_f, 2))
        mask = np.zeros((a, t_h + t_f), dtype=bool)
        for ai, t in enumerate(present):
            onehot = t.class_onehot()
            for step, frame in enumerate(range(w_lo, anchor + 1)):
                if t.first_frame <= frame <= t.last_frame:
                    p = t.at(frame)
                    history[ai, step] = [
                        t.xy[p, 0] - origin[0], t.xy[p, 1] - origin[1],
                        math.cos(t.heading[p]), math.sin(t.heading[p]),
                        t.speed[p], onehot[0], onehot[1],
                    ]
                    mask[ai, step] = True
            for step, frame in enumerate(range(anchor + 1, w_hi + 1)):
                if t.first_frame <= frame <= t.last_frame:
                    p = t.at(frame)
                    future[ai, step] = t.xy[p] - origin
                    mask[ai, t_h + step] = True

        full_ids = {t.track_id for t in full}
        ego_candidates = [
            (float(np.linalg.norm(present[ai].xy[present[ai].at(anchor)] - origin)),
             present[ai].track_id, ai)
            for ai in range(a) if present[ai].track_id in full_ids]
        ego_index = min(ego_candidates)[2]

        samples.append(SceneSample(
            agent_ids=[t.track_id for t in present],
            history=history,
            future_gt=future,
            valid_mask=mask,
            ego_index=ego_index,
            map_ref=map_ref,
            anchor_frame=anchor,
            origin=origin,
        ))
    return samples
