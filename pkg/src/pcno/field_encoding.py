"""Discretized multi-region input encodings, normalization, and dataset files.

Every region carries the same channel stack: binary region-identifier bits
(MSB first, zero-based region index), physical x and t coordinates, then one
channel per demand-node flow series and one per source-node pressure series.
Boundary channels replicate the node series of *all* nodes along the spatial
axis of *every* region, so each region sees the full set of controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .gas_network import (
    BoundarySchedule,
    NetworkTopology,
    check_schedule,
    network_from_json,
    network_to_json,
)
from .transient_solver import GridSpec, StateField

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class ChannelLayout:
    """Channel identities of the per-region input tensor."""

    n_region_bits: int
    demand_nodes: tuple[int, ...]
    source_nodes: tuple[int, ...]

    @property
    def d_a(self) -> int:
        return self.n_region_bits + 2 + len(self.demand_nodes) + len(self.source_nodes)

    @property
    def x_channel(self) -> int:
        return self.n_region_bits

    @property
    def t_channel(self) -> int:
        return self.n_region_bits + 1

    @property
    def coord_channels(self) -> tuple[int, int]:
        return (self.x_channel, self.t_channel)

    def demand_channel(self, node_id: int) -> int:
        return self.n_region_bits + 2 + self.demand_nodes.index(node_id)

    def source_channel(self, node_id: int) -> int:
        return self.n_region_bits + 2 + len(self.demand_nodes) \
            + self.source_nodes.index(node_id)

    def names(self) -> tuple[str, ...]:
        out = [f"region_bit_{i}" for i in range(self.n_region_bits)]
        out += ["x", "t"]
        out += [f"demand_flow_node_{nid}" for nid in self.demand_nodes]
        out += [f"source_pressure_node_{nid}" for nid in self.source_nodes]
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "n_region_bits": self.n_region_bits,
            "demand_nodes": list(self.demand_nodes),
            "source_nodes": list(self.source_nodes),
        }

    @staticmethod
    def from_dict(obj: dict) -> "ChannelLayout":
        return ChannelLayout(
            n_region_bits=int(obj["n_region_bits"]),
            demand_nodes=tuple(int(v) for v in obj["demand_nodes"]),
            source_nodes=tuple(int(v) for v in obj["source_nodes"]),
        )


def channel_layout(network: NetworkTopology) -> ChannelLayout:
    n_regions = len(network.pipes)
    n_bits = max(1, math.ceil(math.log2(n_regions))) if n_regions > 1 else 0
    return ChannelLayout(
        n_region_bits=n_bits,
        demand_nodes=tuple(n.id for n in network.demand_nodes),
        source_nodes=tuple(n.id for n in network.source_nodes),
    )


@dataclass
class InputEncoding:
    """Per-region stacked channels, shape (d_a, d_t, d_x_e) each."""

    regions: list[np.ndarray]
    layout: ChannelLayout
    grid: GridSpec

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def copy(self) -> "InputEncoding":
        return InputEncoding([r.copy() for r in self.regions], self.layout, self.grid)


def encode_inputs(network: NetworkTopology, schedule: BoundarySchedule,
                  grid: GridSpec) -> InputEncoding:
    """Build the multi-region input tensor stack for one scenario."""
    check_schedule(network, schedule)
    layout = channel_layout(network)
    times = grid.time_points(schedule.horizon)
    d_t = len(times)

    demand_rows = {nid: schedule.flow_series(nid, times) for nid in layout.demand_nodes}
    source_rows = {nid: schedule.pressure_series(nid, times) for nid in layout.source_nodes}

    regions: list[np.ndarray] = []
    for e, pipe in enumerate(network.pipes):
        xs = grid.x_points(pipe.length)
        d_x = len(xs)
        enc = np.empty((layout.d_a, d_t, d_x))
        for b in range(layout.n_region_bits):
            bit = (e >> (layout.n_region_bits - 1 - b)) & 1
            enc[b] = float(bit)
        enc[layout.x_channel] = np.broadcast_to(xs, (d_t, d_x))
        enc[layout.t_channel] = np.broadcast_to(times[:, None], (d_t, d_x))
        for nid in layout.demand_nodes:
            enc[layout.demand_channel(nid)] = demand_rows[nid][:, None]
        for nid in layout.source_nodes:
            enc[layout.source_channel(nid)] = source_rows[nid][:, None]
        regions.append(enc)
    return InputEncoding(regions=regions, layout=layout, grid=grid)


@dataclass
class NormStats:
    """Per-channel input statistics plus per-quantity output statistics.

    Coordinate channels are rescaled to [0, 1] by their maximum; every other
    channel is standardized.  Degenerate channels fall back to std 1 so the
    transform stays invertible.
    """

    input_mean: np.ndarray          # (d_a,)
    input_std: np.ndarray           # (d_a,)
    coord_channels: tuple[int, ...]
    output_mean: np.ndarray         # (2,) for (M, P)
    output_std: np.ndarray          # (2,)

    def normalize_encoding(self, enc: InputEncoding) -> InputEncoding:
        mean = self.input_mean[:, None, None]
        std = self.input_std[:, None, None]
        return InputEncoding([(r - mean) / std for r in enc.regions],
                             enc.layout, enc.grid)

    def denormalize_encoding(self, enc: InputEncoding) -> InputEncoding:
        mean = self.input_mean[:, None, None]
        std = self.input_std[:, None, None]
        return InputEncoding([r * std + mean for r in enc.regions],
                             enc.layout, enc.grid)

    def normalize_flow(self, m):
        return (m - self.output_mean[0]) / self.output_std[0]

    def normalize_pressure(self, p):
        return (p - self.output_mean[1]) / self.output_std[1]

    def denormalize_flow(self, m):
        return m * self.output_std[0] + self.output_mean[0]

    def denormalize_pressure(self, p):
        return p * self.output_std[1] + self.output_mean[1]

    def to_dict(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "coord_channels": list(self.coord_channels),
            "output_mean": self.output_mean.tolist(),
            "output_std": self.output_std.tolist(),
        }

    @staticmethod
    def from_dict(obj: dict) -> "NormStats":
        return NormStats(
            input_mean=np.asarray(obj["input_mean"], dtype=np.float64),
            input_std=np.asarray(obj["input_std"], dtype=np.float64),
            coord_channels=tuple(obj["coord_channels"]),
            output_mean=np.asarray(obj["output_mean"], dtype=np.float64),
            output_std=np.asarray(obj["output_std"], dtype=np.float64),
        )


@dataclass
class Sample:
    """One scenario: encoding plus (optionally) the simulated target field."""

    encoding: InputEncoding
    target: StateField | None
    dt: float
    dx: float
    seed: int

    def __post_init__(self) -> None:
        if self.target is not None:
            for enc, m in zip(self.encoding.regions, self.target.M):
                if enc.shape[1:] != m.shape:
                    raise ValueError(
                        f"target grid {m.shape} does not match encoding {enc.shape[1:]}"
                    )


@dataclass
class LazySample:
    """Scenario-backed sample whose encoding is built on demand.

    Functionally interchangeable with :class:`Sample` for training and
    evaluation, but holds only the schedule (plus the optional target field)
    instead of the materialized channel stack; large physics-only instance
    pools stay out of memory this way.
    """

    network: "NetworkTopology"
    schedule: BoundarySchedule
    grid: GridSpec
    seed: int
    target: StateField | None = None

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def dx(self) -> float:
        return self.grid.dx

    @property
    def layout(self) -> ChannelLayout:
        return channel_layout(self.network)

    def materialize(self) -> Sample:
        return Sample(encoding=encode_inputs(self.network, self.schedule, self.grid),
                      target=self.target, dt=self.grid.dt, dx=self.grid.dx,
                      seed=self.seed)


def fit_norm_stats(samples: list) -> NormStats:
    """Channel statistics over every region/grid point of the given samples.

    Accepts :class:`Sample` and :class:`LazySample` mixed; lazy encodings are
    materialized one at a time.
    """
    with_target = [s for s in samples if s.target is not None]
    if not with_target:
        raise ValueError("need at least one sample with a target field")
    first = with_target[0]
    layout = first.layout if isinstance(first, LazySample) else first.encoding.layout
    d_a = layout.d_a

    count = np.zeros(d_a)
    total = np.zeros(d_a)
    total_sq = np.zeros(d_a)
    coord_max = np.zeros(d_a)
    out_count = np.zeros(2)
    out_total = np.zeros(2)
    out_total_sq = np.zeros(2)

    for s in with_target:
        full = s.materialize() if isinstance(s, LazySample) else s
        for enc in full.encoding.regions:
            flat = enc.reshape(d_a, -1)
            count += flat.shape[1]
            total += flat.sum(axis=1)
            total_sq += (flat * flat).sum(axis=1)
            coord_max = np.maximum(coord_max, np.abs(flat).max(axis=1))
        for m, p in zip(full.target.M, full.target.P):
            for q, arr in enumerate((m, p)):
                out_count[q] += arr.size
                out_total[q] += arr.sum()
                out_total_sq[q] += (arr * arr).sum()

    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.sqrt(var)
    std[std < STD_FLOOR] = 1.0

    # Coordinate channels: pure [0, 1] rescale by the observed maximum.
    for c in layout.coord_channels:
        mean[c] = 0.0
        std[c] = coord_max[c] if coord_max[c] > 0 else 1.0

    out_mean = out_total / out_count
    out_var = np.maximum(out_total_sq / out_count - out_mean**2, 0.0)
    out_std = np.sqrt(out_var)
    out_std[out_std < STD_FLOOR] = 1.0

    return NormStats(input_mean=mean, input_std=std,
                     coord_channels=layout.coord_channels,
                     output_mean=out_mean, output_std=out_std)


# --- Dataset persistence -----------------------------------------------------

DATASET_KIND = "pcno-dataset"


def write_dataset(path, manifest: dict, samples: list[Sample],
                  network: NetworkTopology | None = None) -> None:
    """Write samples into the binary container; lossless float64 round-trip."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    layout = samples[0].encoding.layout
    tensors: dict[str, np.ndarray] = {}
    meta = []
    for i, s in enumerate(samples):
        key = f"s{i:05d}"
        for e, enc in enumerate(s.encoding.regions):
            tensors[f"{key}.enc.r{e}"] = enc
        if s.target is not None:
            for e in range(s.target.n_pipes):
                tensors[f"{key}.M.r{e}"] = s.target.M[e]
                tensors[f"{key}.P.r{e}"] = s.target.P[e]
        meta.append({
            "seed": s.seed,
            "dt": s.dt,
            "dx": s.dx,
            "sigma": s.encoding.grid.sigma,
            "has_target": s.target is not None,
            "n_regions": s.encoding.n_regions,
        })
    doc = dict(manifest)
    doc["kind"] = DATASET_KIND
    doc["n_samples"] = len(samples)
    doc["channel_layout"] = layout.to_dict()
    doc["samples"] = meta
    if network is not None:
        doc["network"] = network_to_json(network)
    write_container(path, doc, tensors)


def read_dataset(path) -> tuple[dict, list[Sample]]:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != DATASET_KIND:
        raise ValueError(f"{path}: not a dataset container")
    layout = ChannelLayout.from_dict(manifest["channel_layout"])
    samples: list[Sample] = []
    for i, meta in enumerate(manifest["samples"]):
        key = f"s{i:05d}"
        grid = GridSpec(dt=float(meta["dt"]), dx=float(meta["dx"]),
                        sigma=float(meta["sigma"]))
        regions = [tensors[f"{key}.enc.r{e}"] for e in range(int(meta["n_regions"]))]
        encoding = InputEncoding(regions=regions, layout=layout, grid=grid)
        target = None
        if meta["has_target"]:
            M = [tensors[f"{key}.M.r{e}"] for e in range(int(meta["n_regions"]))]
            P = [tensors[f"{key}.P.r{e}"] for e in range(int(meta["n_regions"]))]
            target = StateField(M=M, P=P, grid=grid)
        samples.append(Sample(encoding=encoding, target=target,
                              dt=float(meta["dt"]), dx=float(meta["dx"]),
                              seed=int(meta["seed"])))
    return manifest, samples


def dataset_network(manifest: dict) -> NetworkTopology:
    net, _ = network_from_json(manifest["network"])
    return net


def export_sample_csv(sample: Sample, directory, prefix: str = "sample") -> list[str]:
    """Write one sample's fields as CSV matrices (rows = time, cols = position)."""
    import os

    written = []
    for e, enc in enumerate(sample.encoding.regions):
        for c, name in enumerate(sample.encoding.layout.names()):
            path = os.path.join(directory, f"{prefix}_enc_r{e}_{name}.csv")
            np.savetxt(path, enc[c], delimiter=",")
            written.append(path)
    if sample.target is not None:
        for e in range(sample.target.n_pipes):
            for qname, arr in (("M", sample.target.M[e]), ("P", sample.target.P[e])):
                path = os.path.join(directory, f"{prefix}_{qname}_r{e}.csv")
                np.savetxt(path, arr, delimiter=",")
                written.append(path)
    return written
