"""Isothermal gas-network solver: steady-state initialization plus an implicit
transient march on the four-point box scheme.

Per pipe the unknowns are mass flow M (kg/s) and pressure P (Pa) on a uniform
space-time grid.  Interior residuals come from the discretized continuity and
momentum balances (pressure-scaled); junctions contribute net-flow balance and
pressure-equality constraints, sources a pressure Dirichlet row and demands a
flow Dirichlet row.  Each transient step solves the resulting nonlinear system
with a damped Newton iteration on a sparse Jacobian.

The residual kernels here (`four_point_residuals`, `steady_residuals`) are
written against plain operators so the physics-loss module can evaluate the
identical code path on tape tensors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .gas_network import (
    LEFT,
    RIGHT,
    BoundarySchedule,
    BoundaryValues,
    NetworkTopology,
    NodeKind,
    PipeSpec,
    check_schedule,
)

PRESSURE_SCALE = 0.3e6   # Pa, common scale for pressure-dimensioned residuals
FLOW_SCALE = 1.0         # kg/s, scale for node flow-balance residuals
PRESSURE_FLOOR = 1.0e2   # Pa, clamp level for non-physical Newton iterates


class SolverError(RuntimeError):
    """Newton failed to converge (or pressures collapsed persistently)."""

    def __init__(self, message: str, residual: float | None = None,
                 time_index: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.time_index = time_index


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid with implicit time weighting sigma in (0.5, 1]."""

    dt: float
    dx: float
    sigma: float = 0.55

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.dx <= 0:
            raise ValueError("dt and dx must be positive")
        if not (0.5 < self.sigma <= 1.0):
            raise ValueError("sigma must lie in (0.5, 1]")

    def n_cells(self, length: float) -> int:
        n = length / self.dx
        n_int = int(round(n))
        if abs(n - n_int) > 1e-9 or n_int < 1:
            raise ValueError(f"pipe length {length} is not a multiple of dx={self.dx}")
        return n_int

    def n_points(self, length: float) -> int:
        return self.n_cells(length) + 1

    def n_times(self, horizon: float) -> int:
        n = horizon / self.dt
        n_int = int(round(n))
        if abs(n - n_int) > 1e-9 or n_int < 1:
            raise ValueError(f"horizon {horizon} is not a multiple of dt={self.dt}")
        return n_int + 1

    def time_points(self, horizon: float) -> np.ndarray:
        return np.arange(self.n_times(horizon)) * self.dt

    def x_points(self, length: float) -> np.ndarray:
        return np.arange(self.n_points(length)) * self.dx


@dataclass
class StateRow:
    """One time level: per-pipe M and P profiles (arrays of length n_points)."""

    M: list[np.ndarray]
    P: list[np.ndarray]

    def copy(self) -> "StateRow":
        return StateRow([m.copy() for m in self.M], [p.copy() for p in self.P])


@dataclass
class StateField:
    """Per-pipe (d_t, d_x_e) space-time fields of mass flow and pressure."""

    M: list[np.ndarray]
    P: list[np.ndarray]
    grid: GridSpec

    @property
    def n_times(self) -> int:
        return self.M[0].shape[0]

    @property
    def n_pipes(self) -> int:
        return len(self.M)

    def row(self, t_index: int) -> StateRow:
        return StateRow([m[t_index].copy() for m in self.M],
                        [p[t_index].copy() for p in self.P])

    def copy(self) -> "StateField":
        return StateField([m.copy() for m in self.M],
                          [p.copy() for p in self.P], self.grid)


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-8    # scaled residual inf-norm
    max_iters: int = 30
    line_search: bool = True

    def __post_init__(self) -> None:
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


# --- Residual kernels (shared with the physics losses) ----------------------

def four_point_residuals(M, P, pipe: PipeSpec, grid: GridSpec):
    """Box-scheme residuals of the continuity (f1) and momentum (f2) balances.

    M, P have shape (..., T, X); both residuals have shape (..., T-1, X-1),
    one value per four-point stencil.  f1 is the pressure-rate form of mass
    conservation carrying ZRT*dt/dx on the flux difference; f2 carries dx/dt
    on the mass-flux rate plus the sigma-weighted pressure difference and the
    Weymouth friction source.  Works on numpy arrays and on tape tensors.
    """
    zrt = pipe.zrt
    area = pipe.area
    sigma = grid.sigma
    c_flux = zrt * grid.dt / grid.dx
    c_mass = grid.dx / grid.dt
    c_fric = pipe.friction * grid.dx / (2.0 * pipe.diameter)

    m = M * (1.0 / area)             # rho*v
    w = (m * abs(m)) * zrt / P       # rho*v*|v|

    ma, mb = m[..., :-1, :-1], m[..., :-1, 1:]
    mc, md = m[..., 1:, :-1], m[..., 1:, 1:]
    pa, pb = P[..., :-1, :-1], P[..., :-1, 1:]
    pc, pd = P[..., 1:, :-1], P[..., 1:, 1:]
    wa, wb = w[..., :-1, :-1], w[..., :-1, 1:]
    wc, wd = w[..., 1:, :-1], w[..., 1:, 1:]

    f1 = (pc - pa) + (pd - pb) + ((md - mc) * sigma + (mb - ma) * (1.0 - sigma)) * c_flux
    f2 = (
        ((mc - ma) + (md - mb)) * c_mass
        + (pd - pc) * sigma + (pb - pa) * (1.0 - sigma)
        + ((wc + wd) * (sigma / 2.0) + (wa + wb) * ((1.0 - sigma) / 2.0)) * c_fric
    )
    return f1, f2


def steady_residuals(M, P, pipe: PipeSpec, grid: GridSpec):
    """Time-derivative-free residuals on a single time level.

    M, P have shape (..., X); outputs (..., X-1).  f1 keeps the ZRT*dt/dx flux
    factor so its magnitude matches the transient form; f2 is the discrete
    steady momentum balance (pressure drop against friction).
    """
    zrt = pipe.zrt
    area = pipe.area
    c_flux = zrt * grid.dt / grid.dx
    c_fric = pipe.friction * grid.dx / (4.0 * pipe.diameter)

    m = M * (1.0 / area)
    w = (m * abs(m)) * zrt / P
    f1 = (m[..., 1:] - m[..., :-1]) * c_flux
    f2 = (P[..., 1:] - P[..., :-1]) + (w[..., :-1] + w[..., 1:]) * c_fric
    return f1, f2


# --- Network system assembly -------------------------------------------------

class _NetworkSystem:
    """Index bookkeeping for the flat unknown vector of one time level.

    Unknowns per pipe are interleaved (M_0, P_0, M_1, P_1, ...) and pipes are
    concatenated; node constraint rows come after all interior stencil rows.
    """

    def __init__(self, network: NetworkTopology, grid: GridSpec):
        self.network = network
        self.grid = grid
        self.n_cells = [grid.n_cells(p.length) for p in network.pipes]
        self.offsets = []
        off = 0
        for n in self.n_cells:
            self.offsets.append(off)
            off += 2 * (n + 1)
        self.n_unknowns = off
        self.n_interior_rows = sum(2 * n for n in self.n_cells)

        # Port -> (M index, P index) in the unknown vector.
        self.port_index: dict[tuple[int, str], tuple[int, int]] = {}
        for e, pipe in enumerate(network.pipes):
            base = self.offsets[e]
            n = self.n_cells[e]
            self.port_index[(pipe.id, LEFT)] = (base, base + 1)
            self.port_index[(pipe.id, RIGHT)] = (base + 2 * n, base + 2 * n + 1)

        n_node_rows = sum(len(n.ports) for n in network.nodes)
        if self.n_interior_rows + n_node_rows != self.n_unknowns:
            raise ValueError(
                "constraint count does not close the system; "
                "check that every pipe end attaches to exactly one node"
            )

    def pack(self, row: StateRow) -> np.ndarray:
        u = np.empty(self.n_unknowns)
        for e in range(len(self.network.pipes)):
            base, n = self.offsets[e], self.n_cells[e]
            u[base:base + 2 * (n + 1):2] = row.M[e]
            u[base + 1:base + 2 * (n + 1):2] = row.P[e]
        return u

    def unpack(self, u: np.ndarray) -> StateRow:
        M, P = [], []
        for e in range(len(self.network.pipes)):
            base, n = self.offsets[e], self.n_cells[e]
            M.append(u[base:base + 2 * (n + 1):2].copy())
            P.append(u[base + 1:base + 2 * (n + 1):2].copy())
        return StateRow(M, P)

    def net_inflow_terms(self, node) -> list[tuple[int, float]]:
        """(M-unknown index, sign) pairs whose signed sum is the node inflow."""
        terms = []
        for pipe_id, end in node.ports:
            m_idx, _ = self.port_index[(pipe_id, end)]
            terms.append((m_idx, 1.0 if end == RIGHT else -1.0))
        return terms


def _assemble(system: _NetworkSystem, u: np.ndarray,
              prev: StateRow | None, boundary: BoundaryValues):
    """Residual vector and COO Jacobian at the current iterate.

    ``prev`` is the known previous time level; None selects the steady
    residuals (time derivatives dropped).
    """
    network, grid = system.network, system.grid
    sigma = grid.sigma
    rows_i: list[np.ndarray] = []
    cols_i: list[np.ndarray] = []
    vals_i: list[np.ndarray] = []
    res = np.zeros(system.n_unknowns)

    row_off = 0
    cur = system.unpack(u)
    for e, pipe in enumerate(network.pipes):
        n = system.n_cells[e]
        base = system.offsets[e]
        area, zrt = pipe.area, pipe.zrt
        c_flux = zrt * grid.dt / grid.dx
        c_mass = grid.dx / grid.dt
        M1, P1 = cur.M[e], cur.P[e]
        m1 = M1 / area
        w1 = zrt * m1 * np.abs(m1) / P1
        dw_dM1 = zrt * 2.0 * np.abs(m1) / (P1 * area)
        dw_dP1 = -zrt * m1 * np.abs(m1) / P1**2

        if prev is None:
            c_fric = pipe.friction * grid.dx / (4.0 * pipe.diameter)
            g1, g2 = steady_residuals(M1, P1, pipe, grid)
            res[row_off:row_off + 2 * n:2] = g1 / PRESSURE_SCALE
            res[row_off + 1:row_off + 2 * n + 1:2] = g2 / PRESSURE_SCALE

            i = np.arange(n)
            r1 = row_off + 2 * i
            r2 = r1 + 1
            mi, mi1 = base + 2 * i, base + 2 * (i + 1)
            pi, pi1 = mi + 1, mi1 + 1
            rows_i += [r1, r1, r2, r2, r2, r2]
            cols_i += [mi, mi1, pi, pi1, mi, mi1]
            vals_i += [
                np.full(n, -c_flux / area) / PRESSURE_SCALE,
                np.full(n, c_flux / area) / PRESSURE_SCALE,
                (-1.0 + c_fric * dw_dP1[:-1]) / PRESSURE_SCALE,
                (1.0 + c_fric * dw_dP1[1:]) / PRESSURE_SCALE,
                (c_fric * dw_dM1[:-1]) / PRESSURE_SCALE,
                (c_fric * dw_dM1[1:]) / PRESSURE_SCALE,
            ]
        else:
            c_fric = pipe.friction * grid.dx / (2.0 * pipe.diameter)
            M2 = np.stack([prev.M[e], M1])
            P2 = np.stack([prev.P[e], P1])
            f1, f2 = four_point_residuals(M2, P2, pipe, grid)
            res[row_off:row_off + 2 * n:2] = f1[0] / PRESSURE_SCALE
            res[row_off + 1:row_off + 2 * n + 1:2] = f2[0] / PRESSURE_SCALE

            i = np.arange(n)
            r1 = row_off + 2 * i
            r2 = r1 + 1
            mi, mi1 = base + 2 * i, base + 2 * (i + 1)
            pi, pi1 = mi + 1, mi1 + 1
            rows_i += [r1, r1, r1, r1, r2, r2, r2, r2]
            cols_i += [pi, pi1, mi, mi1, mi, mi1, pi, pi1]
            vals_i += [
                np.full(n, 1.0) / PRESSURE_SCALE,
                np.full(n, 1.0) / PRESSURE_SCALE,
                np.full(n, -c_flux * sigma / area) / PRESSURE_SCALE,
                np.full(n, c_flux * sigma / area) / PRESSURE_SCALE,
                (c_mass / area + c_fric * (sigma / 2.0) * dw_dM1[:-1]) / PRESSURE_SCALE,
                (c_mass / area + c_fric * (sigma / 2.0) * dw_dM1[1:]) / PRESSURE_SCALE,
                (-sigma + c_fric * (sigma / 2.0) * dw_dP1[:-1]) / PRESSURE_SCALE,
                (sigma + c_fric * (sigma / 2.0) * dw_dP1[1:]) / PRESSURE_SCALE,
            ]
        row_off += 2 * n

    # Node constraint rows.
    rows_n: list[int] = []
    cols_n: list[int] = []
    vals_n: list[float] = []
    r = system.n_interior_rows
    for node in network.nodes:
        if node.kind == NodeKind.SOURCE:
            p_bc = boundary.pressures[node.id]
            for pipe_id, end in node.ports:
                _, p_idx = system.port_index[(pipe_id, end)]
                res[r] = (u[p_idx] - p_bc) / PRESSURE_SCALE
                rows_n.append(r); cols_n.append(p_idx); vals_n.append(1.0 / PRESSURE_SCALE)
                r += 1
            continue

        inflow_terms = system.net_inflow_terms(node)
        net = sum(s * u[idx] for idx, s in inflow_terms)
        demand = boundary.flows[node.id] if node.kind == NodeKind.DEMAND else 0.0
        res[r] = (net - demand) / FLOW_SCALE
        for idx, s in inflow_terms:
            rows_n.append(r); cols_n.append(idx); vals_n.append(s / FLOW_SCALE)
        r += 1
        # Pressure equality across the node's ports.
        _, p0 = system.port_index[node.ports[0]]
        for pipe_id, end in node.ports[1:]:
            _, p_idx = system.port_index[(pipe_id, end)]
            res[r] = (u[p_idx] - u[p0]) / PRESSURE_SCALE
            rows_n += [r, r]
            cols_n += [p_idx, p0]
            vals_n += [1.0 / PRESSURE_SCALE, -1.0 / PRESSURE_SCALE]
            r += 1

    rows = np.concatenate([np.concatenate(rows_i), np.asarray(rows_n)]) \
        if rows_i else np.asarray(rows_n)
    cols = np.concatenate([np.concatenate(cols_i), np.asarray(cols_n)]) \
        if cols_i else np.asarray(cols_n)
    vals = np.concatenate([np.concatenate(vals_i), np.asarray(vals_n)]) \
        if vals_i else np.asarray(vals_n)
    jac = sp.coo_matrix((vals, (rows, cols)),
                        shape=(system.n_unknowns, system.n_unknowns)).tocsc()
    return res, jac


def assemble_residuals(state_t: StateRow | None, state_guess_t1: StateRow,
                       boundary_t1: BoundaryValues, network: NetworkTopology,
                       grid: GridSpec):
    """Scaled residual vector and sparse Jacobian for one time level.

    ``state_t=None`` assembles the steady system.  Residual ordering: per pipe
    the interleaved (continuity, momentum) stencil rows, then node rows in
    network node order.
    """
    system = _NetworkSystem(network, grid)
    for e, m in enumerate(state_guess_t1.M):
        if m.shape[0] != system.n_cells[e] + 1:
            raise ValueError(
                f"pipe index {e}: guess has {m.shape[0]} points, "
                f"grid expects {system.n_cells[e] + 1}"
            )
    u = system.pack(state_guess_t1)
    return _assemble(system, u, state_t, boundary_t1)


def _newton(system: _NetworkSystem, u0: np.ndarray, prev: StateRow | None,
            boundary: BoundaryValues, opts: SolverOptions) -> np.ndarray:
    u = u0.copy()
    clamp_streak = 0
    res, jac = _assemble(system, u, prev, boundary)
    norm = np.max(np.abs(res))
    for _ in range(opts.max_iters):
        if norm <= opts.newton_tol:
            return u
        try:
            delta = spla.splu(jac).solve(-res)
        except RuntimeError as exc:   # singular factorization
            raise SolverError(f"Jacobian factorization failed: {exc}",
                              residual=float(norm)) from exc
        step = 1.0
        norm2 = np.linalg.norm(res)
        p_idx = _pressure_indices(system)
        while True:
            u_try = u + step * delta
            clamped = False
            low = u_try[p_idx] < PRESSURE_FLOOR
            if np.any(low):
                u_try[p_idx[low]] = PRESSURE_FLOOR
                clamped = True
            res_try, jac_try = _assemble(system, u_try, prev, boundary)
            if not opts.line_search or np.linalg.norm(res_try) < norm2 or step < 1e-4:
                break
            step *= 0.5
        clamp_streak = clamp_streak + 1 if clamped else 0
        if clamp_streak >= 5:
            raise SolverError(
                "pressure iterates persistently below floor; system may be infeasible",
                residual=float(np.max(np.abs(res_try))),
            )
        u, res, jac = u_try, res_try, jac_try
        norm = np.max(np.abs(res))
    if norm <= opts.newton_tol:
        return u
    raise SolverError(
        f"Newton did not converge in {opts.max_iters} iterations "
        f"(scaled residual {norm:.3e} > {opts.newton_tol:.1e})",
        residual=float(norm),
    )


def _pressure_indices(system: _NetworkSystem) -> np.ndarray:
    # Odd offsets within each pipe block hold pressures.
    idx = []
    for e in range(len(system.network.pipes)):
        base, n = system.offsets[e], system.n_cells[e]
        idx.append(np.arange(base + 1, base + 2 * (n + 1), 2))
    return np.concatenate(idx)


def _initial_flow_guess(network: NetworkTopology, boundary: BoundaryValues) -> np.ndarray:
    """Per-pipe flow guess from the node balance equations (least squares)."""
    n_pipes = len(network.pipes)
    rows, rhs = [], []
    for node in network.nodes:
        if node.kind == NodeKind.SOURCE:
            continue
        coeff = np.zeros(n_pipes)
        for pipe_id, end in node.ports:
            coeff[network.pipe_index(pipe_id)] += 1.0 if end == RIGHT else -1.0
        rows.append(coeff)
        rhs.append(boundary.flows[node.id] if node.kind == NodeKind.DEMAND else 0.0)
    if not rows:
        return np.zeros(n_pipes)
    A = np.asarray(rows)
    b = np.asarray(rhs)
    flows, *_ = np.linalg.lstsq(A, b, rcond=None)
    return flows


def solve_steady_state(network: NetworkTopology, boundary0: BoundaryValues,
                       grid: GridSpec,
                       opts: SolverOptions = SolverOptions()) -> StateRow:
    """Steady flow/pressure profiles satisfying the discrete steady balances.

    Mass flow is constant along each pipe; the pressure profile satisfies the
    discrete momentum drop cell by cell, and all node constraints hold to the
    Newton tolerance.
    """
    system = _NetworkSystem(network, grid)
    flows = _initial_flow_guess(network, boundary0)
    p0 = float(np.mean(list(boundary0.pressures.values())))
    guess = StateRow(
        M=[np.full(n + 1, flows[e]) for e, n in enumerate(system.n_cells)],
        P=[np.full(n + 1, p0) for n in system.n_cells],
    )
    u = _newton(system, system.pack(guess), None, boundary0, opts)
    return system.unpack(u)


def step_transient(state_t: StateRow, boundary_t1: BoundaryValues,
                   network: NetworkTopology, grid: GridSpec,
                   opts: SolverOptions = SolverOptions()) -> StateRow:
    """Advance one time level; the previous row is the Newton initial guess."""
    system = _NetworkSystem(network, grid)
    u = _newton(system, system.pack(state_t), state_t, boundary_t1, opts)
    return system.unpack(u)


def simulate(network: NetworkTopology, schedule: BoundarySchedule, grid: GridSpec,
             opts: SolverOptions = SolverOptions()) -> StateField:
    """Full transient run: steady initialization plus one implicit step per dt."""
    check_schedule(network, schedule)
    system = _NetworkSystem(network, grid)
    times = grid.time_points(schedule.horizon)
    n_t = len(times)

    M = [np.empty((n_t, n + 1)) for n in system.n_cells]
    P = [np.empty((n_t, n + 1)) for n in system.n_cells]

    row = solve_steady_state(network, schedule.boundary_at(0.0), grid, opts)
    for e in range(len(network.pipes)):
        M[e][0], P[e][0] = row.M[e], row.P[e]
    for k in range(1, n_t):
        try:
            row = step_transient(row, schedule.boundary_at(times[k]), network, grid, opts)
        except SolverError as exc:
            raise SolverError(f"step to t={times[k]:.0f}s (index {k}) failed: {exc}",
                              residual=exc.residual, time_index=k) from exc
        for e in range(len(network.pipes)):
            M[e][k], P[e][k] = row.M[e], row.P[e]
    return StateField(M=M, P=P, grid=grid)


def restrict_field(field: StateField, time_factor: int, space_factor: int) -> StateField:
    """Pointwise subsampling onto a coarser grid sharing the same grid points."""
    if time_factor < 1 or space_factor < 1:
        raise ValueError("factors must be >= 1")
    for m in field.M:
        if (m.shape[0] - 1) % time_factor != 0:
            raise ValueError(f"time steps {m.shape[0] - 1} not divisible by {time_factor}")
        if (m.shape[1] - 1) % space_factor != 0:
            raise ValueError(f"space cells {m.shape[1] - 1} not divisible by {space_factor}")
    grid = dataclasses.replace(field.grid, dt=field.grid.dt * time_factor,
                               dx=field.grid.dx * space_factor)
    return StateField(
        M=[m[::time_factor, ::space_factor].copy() for m in field.M],
        P=[p[::time_factor, ::space_factor].copy() for p in field.P],
        grid=grid,
    )


def junction_imbalance(field: StateField, network: NetworkTopology) -> np.ndarray:
    """Max |net inflow| over junction nodes, per time row (kg/s)."""
    worst = np.zeros(field.n_times)
    for node in network.junction_nodes:
        net = np.zeros(field.n_times)
        for pipe_id, end in node.ports:
            e = network.pipe_index(pipe_id)
            net += field.M[e][:, -1] if end == RIGHT else -field.M[e][:, 0]
        worst = np.maximum(worst, np.abs(net))
    return worst


def junction_pressure_spread(field: StateField, network: NetworkTopology) -> np.ndarray:
    """Max pairwise pressure difference across each junction, per time row (Pa)."""
    worst = np.zeros(field.n_times)
    for node in network.nodes:
        if len(node.ports) < 2:
            continue
        cols = []
        for pipe_id, end in node.ports:
            e = network.pipe_index(pipe_id)
            cols.append(field.P[e][:, -1] if end == RIGHT else field.P[e][:, 0])
        stack = np.stack(cols)
        worst = np.maximum(worst, stack.max(axis=0) - stack.min(axis=0))
    return worst
