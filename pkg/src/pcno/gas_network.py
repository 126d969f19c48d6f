"""Pipeline-network topology, pipe physics, and time-varying boundary schedules.

Networks are graphs of pipes joined at nodes.  A node is a pressure-controlled
source, a mass-conserving junction, or a flow-controlled demand.  Boundary
schedules are piecewise-constant series (optionally ramped) driving the source
pressures and demand flows over a finite horizon, plus a seeded square-wave
generator for random demand scenarios.

Units are SI throughout: meters, seconds, pascals, kg/s, kelvin.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

INCHES_PER_METER = 39.3701

# Paper-network defaults (shared by all three pipes).
DEFAULT_COMPRESSIBILITY = 1.0
DEFAULT_GAS_CONSTANT = 288.0937     # J/(kg K)
DEFAULT_TEMPERATURE = 288.15        # K
SOURCE_PRESSURE_PA = 0.3e6

LEFT = "left"
RIGHT = "right"


class NodeKind(str, Enum):
    SOURCE = "source"
    JUNCTION = "junction"
    DEMAND = "demand"


def compute_weymouth_friction(diameter: float, efficiency: float = 1.0) -> float:
    """Friction factor lambda from the Weymouth correlation.

    ``sqrt(1/f) = 11.19 * D_in^0.167 * E`` with the diameter in inches, and
    lambda = 4 f.  Strictly decreasing in both diameter and efficiency.
    """
    if diameter <= 0:
        raise ValueError(f"diameter must be positive, got {diameter}")
    if efficiency <= 0:
        raise ValueError(f"efficiency must be positive, got {efficiency}")
    d_inch = diameter * INCHES_PER_METER
    f = 1.0 / (11.19 * d_inch**0.167 * efficiency) ** 2
    return 4.0 * f


@dataclass(frozen=True)
class PipeSpec:
    """One pipe segment: geometry plus gas-law constants.

    ``friction`` is the stored lambda;  it may be set verbatim (e.g. catalog
    values) rather than recomputed from the Weymouth correlation.
    """

    id: int
    diameter: float                 # m
    length: float                   # m
    friction: float                 # lambda, dimensionless
    compressibility: float = DEFAULT_COMPRESSIBILITY
    gas_constant: float = DEFAULT_GAS_CONSTANT
    temperature: float = DEFAULT_TEMPERATURE
    efficiency: float = 1.0

    def __post_init__(self) -> None:
        if self.diameter <= 0:
            raise ValueError(f"pipe {self.id}: diameter must be > 0")
        if self.length <= 0:
            raise ValueError(f"pipe {self.id}: length must be > 0")
        if self.friction <= 0:
            raise ValueError(f"pipe {self.id}: friction must be > 0")
        if not (0.0 < self.efficiency <= 1.5):
            raise ValueError(f"pipe {self.id}: efficiency must be in (0, 1.5]")

    @property
    def area(self) -> float:
        """Cross-sectional area, derived from the diameter."""
        return math.pi * self.diameter**2 / 4.0

    @property
    def zrt(self) -> float:
        """Z*R*T, the pressure/density ratio of the linear gas law (m^2/s^2)."""
        return self.compressibility * self.gas_constant * self.temperature


@dataclass(frozen=True)
class NodeSpec:
    id: int
    kind: NodeKind
    ports: tuple[tuple[int, str], ...]   # (pipe id, "left" | "right")

    def __post_init__(self) -> None:
        for pipe_id, end in self.ports:
            if end not in (LEFT, RIGHT):
                raise ValueError(f"node {self.id}: bad pipe end {end!r}")


@dataclass(frozen=True)
class NetworkTopology:
    pipes: tuple[PipeSpec, ...]
    nodes: tuple[NodeSpec, ...]

    def pipe(self, pipe_id: int) -> PipeSpec:
        for p in self.pipes:
            if p.id == pipe_id:
                return p
        raise KeyError(f"no pipe with id {pipe_id}")

    def node(self, node_id: int) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"no node with id {node_id}")

    def nodes_of_kind(self, kind: NodeKind) -> tuple[NodeSpec, ...]:
        return tuple(n for n in self.nodes if n.kind == kind)

    @property
    def source_nodes(self) -> tuple[NodeSpec, ...]:
        return self.nodes_of_kind(NodeKind.SOURCE)

    @property
    def demand_nodes(self) -> tuple[NodeSpec, ...]:
        return self.nodes_of_kind(NodeKind.DEMAND)

    @property
    def junction_nodes(self) -> tuple[NodeSpec, ...]:
        return self.nodes_of_kind(NodeKind.JUNCTION)

    def pipe_index(self, pipe_id: int) -> int:
        for i, p in enumerate(self.pipes):
            if p.id == pipe_id:
                return i
        raise KeyError(f"no pipe with id {pipe_id}")


def validate_topology(network: NetworkTopology) -> list[str]:
    """Collect every structural violation; an empty list means the network is ok."""
    violations: list[str] = []
    pipe_ids = [p.id for p in network.pipes]
    if len(set(pipe_ids)) != len(pipe_ids):
        violations.append("duplicate pipe ids")
    node_ids = [n.id for n in network.nodes]
    if len(set(node_ids)) != len(node_ids):
        violations.append("duplicate node ids")

    # Every pipe end must attach to exactly one node.
    seen: dict[tuple[int, str], int] = {}
    for node in network.nodes:
        for pipe_id, end in node.ports:
            if pipe_id not in pipe_ids:
                violations.append(f"node {node.id} references unknown pipe {pipe_id}")
                continue
            key = (pipe_id, end)
            if key in seen:
                violations.append(
                    f"duplicate port: pipe {pipe_id} {end} end attached to nodes "
                    f"{seen[key]} and {node.id}"
                )
            seen[key] = node.id
    for p in network.pipes:
        for end in (LEFT, RIGHT):
            if (p.id, end) not in seen:
                violations.append(f"pipe {p.id} {end} end attached to no node")

    if not network.source_nodes:
        violations.append("no pressure reference: network has no source node")

    # Connectivity over the pipe-node graph.
    if network.nodes and not violations:
        adjacency: dict[int, set[int]] = {n.id: set() for n in network.nodes}
        owner: dict[tuple[int, str], int] = seen
        for p in network.pipes:
            a = owner[(p.id, LEFT)]
            b = owner[(p.id, RIGHT)]
            adjacency[a].add(b)
            adjacency[b].add(a)
        stack = [network.nodes[0].id]
        reached = {network.nodes[0].id}
        while stack:
            for nb in adjacency[stack.pop()]:
                if nb not in reached:
                    reached.add(nb)
                    stack.append(nb)
        if reached != set(node_ids):
            violations.append("network graph is not connected")

    return violations


@dataclass(frozen=True)
class PiecewiseSeries:
    """Piecewise-constant series: ``levels[i]`` holds on ``[times[i-1], times[i])``.

    ``len(levels) == len(times) + 1``; times are strictly increasing switch
    instants in the open interval (0, horizon).
    """

    times: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.levels) != len(self.times) + 1:
            raise ValueError("need exactly len(times)+1 levels")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("switch times must be strictly increasing")

    @staticmethod
    def constant(level: float) -> "PiecewiseSeries":
        return PiecewiseSeries(times=(), levels=(level,))

    def value_at(self, t: float | np.ndarray, ramp: float = 0.0) -> float | np.ndarray:
        """Level at time t, linearly blended over a window of width ramp at each switch.

        Each switch gets a half-width of min(ramp/2, half the gap to its
        neighbours), so overlapping windows never occur.
        """
        scalar = np.isscalar(t) or np.ndim(t) == 0
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.full(t_arr.shape, self.levels[0], dtype=np.float64)
        if self.times:
            idx = np.searchsorted(self.times, t_arr, side="right")
            out = np.asarray(self.levels, dtype=np.float64)[idx]
            if ramp > 0.0:
                for i, ts in enumerate(self.times):
                    half = ramp / 2.0
                    if i > 0:
                        half = min(half, (ts - self.times[i - 1]) / 2.0)
                    if i + 1 < len(self.times):
                        half = min(half, (self.times[i + 1] - ts) / 2.0)
                    if half <= 0.0:
                        continue
                    lo, hi = ts - half, ts + half
                    mask = (t_arr > lo) & (t_arr < hi)
                    if np.any(mask):
                        frac = (t_arr[mask] - lo) / (2.0 * half)
                        out[mask] = (1.0 - frac) * self.levels[i] + frac * self.levels[i + 1]
        if scalar:
            return float(out[0])
        return out.reshape(np.shape(t))

    def min_level(self) -> float:
        return min(self.levels)

    def max_level(self) -> float:
        return max(self.levels)


@dataclass(frozen=True)
class BoundaryValues:
    pressures: Mapping[int, float]   # source node id -> Pa
    flows: Mapping[int, float]       # demand node id -> kg/s


@dataclass(frozen=True)
class BoundarySchedule:
    """All boundary series of a network over one horizon.

    ``ramp`` is the width of the linear blend applied at each level switch;
    zero reproduces the ideal square wave.
    """

    horizon: float
    source_pressure: Mapping[int, PiecewiseSeries]
    demand_flow: Mapping[int, PiecewiseSeries]
    ramp: float = 640.0

    def __post_init__(self) -> None:
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.ramp < 0:
            raise ValueError("ramp must be >= 0")
        for nid, series in self.source_pressure.items():
            if min(series.levels) <= 0:
                raise ValueError(f"source node {nid}: pressures must be positive")
        for nid, series in self.demand_flow.items():
            if min(series.levels) < 0:
                raise ValueError(f"demand node {nid}: flows must be non-negative")

    def boundary_at(self, t: float) -> BoundaryValues:
        if t < 0 or t > self.horizon:
            raise ValueError(f"t={t} outside horizon [0, {self.horizon}]")
        return BoundaryValues(
            pressures={nid: float(s.value_at(t, self.ramp))
                       for nid, s in self.source_pressure.items()},
            flows={nid: float(s.value_at(t, self.ramp))
                   for nid, s in self.demand_flow.items()},
        )

    def pressure_series(self, node_id: int, times: np.ndarray) -> np.ndarray:
        return np.asarray(self.source_pressure[node_id].value_at(times, self.ramp))

    def flow_series(self, node_id: int, times: np.ndarray) -> np.ndarray:
        return np.asarray(self.demand_flow[node_id].value_at(times, self.ramp))

    def with_demands(self, demand_flow: Mapping[int, PiecewiseSeries]) -> "BoundarySchedule":
        return dataclasses.replace(self, demand_flow=dict(demand_flow))


def boundary_at(schedule: BoundarySchedule, t: float) -> BoundaryValues:
    """Boundary values of every controlled node at time t (ramped)."""
    return schedule.boundary_at(t)


def check_schedule(network: NetworkTopology, schedule: BoundarySchedule) -> None:
    """Require exactly one series per source and per demand node."""
    src = {n.id for n in network.source_nodes}
    dem = {n.id for n in network.demand_nodes}
    if set(schedule.source_pressure) != src:
        raise ValueError(
            f"schedule pressure series {sorted(schedule.source_pressure)} "
            f"do not match source nodes {sorted(src)}"
        )
    if set(schedule.demand_flow) != dem:
        raise ValueError(
            f"schedule flow series {sorted(schedule.demand_flow)} "
            f"do not match demand nodes {sorted(dem)}"
        )


@dataclass(frozen=True)
class SquareWaveSpec:
    """Random square-wave scenario: levels in [level_min, level_max] kg/s and a
    uniformly drawn number of switches in [switch_count_min, switch_count_max]."""

    level_min: float = 0.5
    level_max: float = 2.0
    switch_count_min: int = 0
    switch_count_max: int = 24
    horizon: float = 86400.0

    def __post_init__(self) -> None:
        if self.level_min > self.level_max:
            raise ValueError("level_min must be <= level_max")
        if self.switch_count_min > self.switch_count_max:
            raise ValueError("switch_count_min must be <= switch_count_max")
        if self.switch_count_min < 0:
            raise ValueError("switch counts must be >= 0")


def sample_square_wave(spec: SquareWaveSpec, seed: int) -> PiecewiseSeries:
    """Draw one random square wave; deterministic for a fixed seed.

    k ~ U{switch_count_min..switch_count_max} switches at distinct uniform
    times in (0, horizon), with k+1 levels ~ U[level_min, level_max].
    """
    rng = np.random.default_rng(seed)
    k = int(rng.integers(spec.switch_count_min, spec.switch_count_max + 1))
    while True:
        times = np.sort(rng.uniform(0.0, spec.horizon, size=k))
        if k == 0 or (np.all(np.diff(times) > 0) and times[0] > 0):
            break
    levels = rng.uniform(spec.level_min, spec.level_max, size=k + 1)
    return PiecewiseSeries(times=tuple(float(t) for t in times),
                           levels=tuple(float(v) for v in levels))


# --- The three-pipe reference network -------------------------------------

PAPER_PIPES = (
    # (id, diameter m, length m, lambda)
    (1, 0.5, 60000.0, 0.011851315),
    (2, 0.6, 50000.0, 0.011152515),
    (3, 0.7, 40000.0, 0.010593932),
)


def build_paper_network() -> tuple[NetworkTopology, BoundarySchedule]:
    """Reference 3-pipe network and a template schedule.

    Pipe 1 runs from the source node into the junction; pipes 2 and 3 run
    from the junction to one demand node each.  The source holds 0.3 MPa and
    the template demands are constant 1 kg/s (replace via ``with_demands``).
    Stored lambda values are catalog values, not recomputed.
    """
    pipes = tuple(
        PipeSpec(id=pid, diameter=d, length=length, friction=lam)
        for pid, d, length, lam in PAPER_PIPES
    )
    nodes = (
        NodeSpec(id=0, kind=NodeKind.SOURCE, ports=((1, LEFT),)),
        NodeSpec(id=1, kind=NodeKind.JUNCTION, ports=((1, RIGHT), (2, LEFT), (3, LEFT))),
        NodeSpec(id=2, kind=NodeKind.DEMAND, ports=((2, RIGHT),)),
        NodeSpec(id=3, kind=NodeKind.DEMAND, ports=((3, RIGHT),)),
    )
    network = NetworkTopology(pipes=pipes, nodes=nodes)
    schedule = BoundarySchedule(
        horizon=86400.0,
        source_pressure={0: PiecewiseSeries.constant(SOURCE_PRESSURE_PA)},
        demand_flow={2: PiecewiseSeries.constant(1.0),
                     3: PiecewiseSeries.constant(1.0)},
    )
    return network, schedule


def sample_schedule(network: NetworkTopology,
                    source_pressure: Mapping[int, PiecewiseSeries],
                    seed: int,
                    spec: SquareWaveSpec | None = None,
                    ramp: float = 640.0) -> BoundarySchedule:
    """Random square-wave demands on every demand node of a network.

    Demand node i uses child seed ``seed*K + i`` so scenarios with different
    base seeds never share draws.
    """
    spec = spec or SquareWaveSpec()
    demands = {
        node.id: sample_square_wave(spec, seed * 1000003 + node.id)
        for node in network.demand_nodes
    }
    return BoundarySchedule(
        horizon=spec.horizon,
        source_pressure=dict(source_pressure),
        demand_flow=demands,
        ramp=ramp,
    )


def sample_paper_schedule(seed: int,
                          spec: SquareWaveSpec | None = None,
                          ramp: float = 640.0) -> tuple[NetworkTopology, BoundarySchedule]:
    """Reference network with independently sampled square-wave demands."""
    network, template = build_paper_network()
    schedule = sample_schedule(network, template.source_pressure, seed, spec, ramp)
    return network, schedule


# --- JSON serialization ----------------------------------------------------

def series_to_json(series: PiecewiseSeries) -> dict:
    return {"times": list(series.times), "levels": list(series.levels)}


def series_from_json(obj: dict) -> PiecewiseSeries:
    return PiecewiseSeries(times=tuple(obj["times"]), levels=tuple(obj["levels"]))


def network_to_json(network: NetworkTopology,
                    schedule: BoundarySchedule | None = None) -> dict:
    doc = {
        "pipes": [
            {
                "id": p.id,
                "diameter_m": p.diameter,
                "length_m": p.length,
                "lambda": p.friction,
                "Z": p.compressibility,
                "R": p.gas_constant,
                "T_K": p.temperature,
                "E": p.efficiency,
            }
            for p in network.pipes
        ],
        "nodes": [
            {"id": n.id, "kind": n.kind.value, "ports": [[pid, end] for pid, end in n.ports]}
            for n in network.nodes
        ],
    }
    if schedule is not None:
        doc["schedule"] = {
            "horizon": schedule.horizon,
            "ramp": schedule.ramp,
            "source_pressure": {str(k): series_to_json(v)
                                for k, v in schedule.source_pressure.items()},
            "demand_flow": {str(k): series_to_json(v)
                            for k, v in schedule.demand_flow.items()},
        }
    return doc


def network_from_json(doc: dict) -> tuple[NetworkTopology, BoundarySchedule | None]:
    pipes = tuple(
        PipeSpec(
            id=int(p["id"]),
            diameter=float(p["diameter_m"]),
            length=float(p["length_m"]),
            friction=float(p["lambda"]),
            compressibility=float(p["Z"]),
            gas_constant=float(p["R"]),
            temperature=float(p["T_K"]),
            efficiency=float(p["E"]),
        )
        for p in doc["pipes"]
    )
    nodes = tuple(
        NodeSpec(
            id=int(n["id"]),
            kind=NodeKind(n["kind"].lower()),
            ports=tuple((int(pid), str(end)) for pid, end in n["ports"]),
        )
        for n in doc["nodes"]
    )
    network = NetworkTopology(pipes=pipes, nodes=nodes)
    schedule = None
    if "schedule" in doc:
        s = doc["schedule"]
        schedule = BoundarySchedule(
            horizon=float(s["horizon"]),
            ramp=float(s.get("ramp", 0.0)),
            source_pressure={int(k): series_from_json(v)
                             for k, v in s["source_pressure"].items()},
            demand_flow={int(k): series_from_json(v)
                         for k, v in s["demand_flow"].items()},
        )
    return network, schedule


def save_network(path, network: NetworkTopology,
                 schedule: BoundarySchedule | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_json(network, schedule), fh, indent=2)


def load_network(path) -> tuple[NetworkTopology, BoundarySchedule | None]:
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_json(json.load(fh))
