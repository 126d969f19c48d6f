"""Data loss and the finite-difference physics loss stack.

All physics terms run on the *same* residual kernels as the transient solver
(`four_point_residuals`, `steady_residuals`), evaluated on tape tensors in
physical units, so a converged solver trajectory scores near zero on every
component.  The data term works in normalized units; balancing across the
flow/pressure magnitudes is handled by the normalization statistics.

Predictions are per-region pairs ``(M, P)`` of tensors shaped (B, T, X_e).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, wrap
from .field_encoding import NormStats
from .gas_network import LEFT, RIGHT, BoundarySchedule, NetworkTopology, NodeKind
from .transient_solver import GridSpec, StateField, four_point_residuals, steady_residuals


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective.

    ``delta1=None`` resolves to the gas-law factor Z*R*T of the network, which
    rescales the flow-balance term to pressure magnitude.
    """

    alpha0: float = 0.2
    alpha1: float = 2.5
    alpha2: float = 30.0
    beta0: float = 0.1
    beta1: float = 2.5
    beta2: float = 30.0
    delta0: float = 0.2
    delta1: float | None = None
    delta2: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha0", "alpha1", "alpha2", "beta0", "beta1", "beta2",
                     "delta0", "delta2", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.delta1 is not None and self.delta1 < 0:
            raise ValueError("delta1 must be >= 0")

    def resolve_delta1(self, network: NetworkTopology) -> float:
        return self.delta1 if self.delta1 is not None else network.pipes[0].zrt

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "LossWeights":
        return LossWeights(**obj)


@dataclass
class LossReport:
    data: float = 0.0
    equation: float = 0.0
    initial: float = 0.0
    boundary_flow: float = 0.0
    boundary_pressure: float = 0.0
    boundary: float = 0.0
    pde: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("data", "equation", "initial", "boundary_flow",
                  "boundary_pressure", "boundary", "pde", "total")

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, f):.10e}" for f in self.CSV_FIELDS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(LossReport.CSV_FIELDS)


@dataclass
class BoundaryArrays:
    """Boundary series of one batch, sampled on the grid times: (B, T) arrays."""

    times: np.ndarray
    flows: Mapping[int, np.ndarray]
    pressures: Mapping[int, np.ndarray]


def boundary_arrays(schedules: Sequence[BoundarySchedule], grid: GridSpec) -> BoundaryArrays:
    horizon = schedules[0].horizon
    if any(s.horizon != horizon for s in schedules):
        raise ValueError("batch members must share the horizon")
    times = grid.time_points(horizon)
    flows: dict[int, np.ndarray] = {}
    pressures: dict[int, np.ndarray] = {}
    for nid in schedules[0].demand_flow:
        flows[nid] = np.stack([s.flow_series(nid, times) for s in schedules])
    for nid in schedules[0].source_pressure:
        pressures[nid] = np.stack([s.pressure_series(nid, times) for s in schedules])
    return BoundaryArrays(times=times, flows=flows, pressures=pressures)


def _rms(x: Tensor) -> Tensor:
    return ad.sqrt(ad.mean(x * x))


def _port_column(pred, network: NetworkTopology, pipe_id: int, end: str,
                 quantity: int) -> Tensor:
    e = network.pipe_index(pipe_id)
    t = pred[e][quantity]
    col = -1 if end == RIGHT else 0
    return t[..., col]


def data_loss(pred, target: Sequence[tuple[np.ndarray, np.ndarray]],
              norm: NormStats, gamma1: float = 1.0, gamma2: float = 1.0) -> Tensor:
    """Region-averaged RMSE of flow and pressure in normalized units."""
    n = len(pred)
    total = None
    for (m, p), (m_true, p_true) in zip(pred, target):
        if m.data.shape != np.shape(m_true):
            raise ValueError(f"grid mismatch: {m.data.shape} vs {np.shape(m_true)}")
        dm = norm.normalize_flow(m) - wrap(norm.normalize_flow(np.asarray(m_true)))
        dp = norm.normalize_pressure(p) - wrap(norm.normalize_pressure(np.asarray(p_true)))
        term = _rms(dm) * (gamma1 / n) + _rms(dp) * (gamma2 / n)
        total = term if total is None else total + term
    return total


def equation_loss(pred, network: NetworkTopology, grid: GridSpec,
                  alpha1: float = 2.5, alpha2: float = 30.0) -> Tensor:
    """Region-averaged RMS of the two box-scheme residuals over all stencils."""
    n = len(pred)
    total = None
    for (m, p), pipe in zip(pred, network.pipes):
        if m.data.shape[-2] < 2 or m.data.shape[-1] < 2:
            raise ValueError("grid too small for a four-point stencil")
        f1, f2 = four_point_residuals(m, p, pipe, grid)
        term = _rms(f1) * (alpha1 / n) + _rms(f2) * (alpha2 / n)
        total = term if total is None else total + term
    return total


def initial_loss(pred, network: NetworkTopology, grid: GridSpec,
                 beta1: float = 2.5, beta2: float = 30.0) -> Tensor:
    """Steady residuals on the t = 0 row only."""
    n = len(pred)
    total = None
    for (m, p), pipe in zip(pred, network.pipes):
        m0 = m[..., 0, :]
        p0 = p[..., 0, :]
        g1, g2 = steady_residuals(m0, p0, pipe, grid)
        term = _rms(g1) * (beta1 / n) + _rms(g2) * (beta2 / n)
        total = term if total is None else total + term
    return total


def boundary_loss_flow(pred, network: NetworkTopology,
                       bounds: BoundaryArrays) -> Tensor:
    """Demand matching plus junction net-flow balance, RMS over time."""
    demand_nodes = network.demand_nodes
    junctions = network.junction_nodes
    total = None

    if demand_nodes:
        term = None
        for node in demand_nodes:
            net = _node_net_inflow(pred, network, node)
            diff = net - wrap(np.asarray(bounds.flows[node.id]))
            piece = _rms(diff) * (1.0 / len(demand_nodes))
            term = piece if term is None else term + piece
        total = term
    if junctions:
        term = None
        for node in junctions:
            net = _node_net_inflow(pred, network, node)
            piece = _rms(net) * (1.0 / len(junctions))
            term = piece if term is None else term + piece
        total = term if total is None else total + term
    return total if total is not None else wrap(np.zeros(()))


def _node_net_inflow(pred, network: NetworkTopology, node) -> Tensor:
    net = None
    for pipe_id, end in node.ports:
        col = _port_column(pred, network, pipe_id, end, quantity=0)
        signed = col if end == RIGHT else -col
        net = signed if net is None else net + signed
    return net


def boundary_loss_pressure(pred, network: NetworkTopology,
                           bounds: BoundaryArrays) -> Tensor:
    """Source-pressure matching plus pairwise junction pressure equality."""
    sources = network.source_nodes
    junctions = network.junction_nodes
    total = None

    if sources:
        term = None
        for node in sources:
            series = wrap(np.asarray(bounds.pressures[node.id]))
            inner = None
            for pipe_id, end in node.ports:
                p_col = _port_column(pred, network, pipe_id, end, quantity=1)
                piece = _rms(p_col - series) * (1.0 / len(node.ports))
                inner = piece if inner is None else inner + piece
            inner = inner * (1.0 / len(sources))
            term = inner if term is None else term + inner
        total = term
    if junctions:
        term = None
        for node in junctions:
            cols = [_port_column(pred, network, pid, end, quantity=1)
                    for pid, end in node.ports]
            k = len(cols)
            n_pairs = k * (k - 1) // 2
            if n_pairs == 0:
                continue
            inner = None
            for i in range(k):
                for j in range(i + 1, k):
                    piece = _rms(cols[i] - cols[j]) * (1.0 / n_pairs)
                    inner = piece if inner is None else inner + piece
            inner = inner * (1.0 / len(junctions))
            term = inner if term is None else term + inner
        if term is not None:
            total = term if total is None else total + term
    return total if total is not None else wrap(np.zeros(()))


def pde_loss(pred, network: NetworkTopology, bounds: BoundaryArrays,
             grid: GridSpec, weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted physics loss; the report carries every component in floats."""
    eq = equation_loss(pred, network, grid, weights.alpha1, weights.alpha2)
    init = initial_loss(pred, network, grid, weights.beta1, weights.beta2)
    b_m = boundary_loss_flow(pred, network, bounds)
    b_p = boundary_loss_pressure(pred, network, bounds)
    delta1 = weights.resolve_delta1(network)
    boundary = b_m * delta1 + b_p * weights.delta2
    total = eq * weights.alpha0 + init * weights.beta0 + boundary * weights.delta0
    report = LossReport(
        equation=eq.item(), initial=init.item(),
        boundary_flow=b_m.item(), boundary_pressure=b_p.item(),
        boundary=boundary.item(), pde=total.item(), total=total.item(),
    )
    return total, report


def field_as_pred(field: StateField) -> list[tuple[Tensor, Tensor]]:
    """Wrap a simulator trajectory as a single-sample prediction batch."""
    return [(wrap(m[None]), wrap(p[None])) for m, p in zip(field.M, field.P)]
