"""Newton-Raphson AC power flow in polar coordinates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import AdmittanceMatrix, BusKind, Network, branch_admittances, build_ybus, check_connectivity

logger = logging.getLogger(__name__)

V_MIN, V_MAX = 0.2, 5.0


class SolverError(RuntimeError):
    pass


class DisconnectedNetworkError(ValueError):
    pass


@dataclass(frozen=True)
class VoltageState:
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if v.shape != theta.shape or v.ndim != 1:
            raise ValueError("v and theta must be 1-D arrays of equal length")
        if np.any(v <= 0):
            raise ValueError("voltage magnitudes must be positive")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", theta)

    @property
    def complex(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)


@dataclass(frozen=True)
class InjectionVector:
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class Jacobian:
    matrix: sp.csc_matrix
    theta_buses: np.ndarray  # unknown angles (non-slack)
    v_buses: np.ndarray  # unknown magnitudes (PQ)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PFSolution:
    state: VoltageState
    iterations: int
    max_mismatch: float
    converged: bool
    slack_p: float
    slack_q: float

    def to_dict(self) -> dict:
        return {
            "v": self.state.v.tolist(),
            "theta": self.state.theta.tolist(),
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
            "converged": self.converged,
            "slack_p": self.slack_p,
            "slack_q": self.slack_q,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "PFSolution":
        return cls(
            state=VoltageState(np.array(d["v"]), np.array(d["theta"])),
            iterations=d["iterations"],
            max_mismatch=d["max_mismatch"],
            converged=d["converged"],
            slack_p=d["slack_p"],
            slack_q=d["slack_q"],
        )


def flat_start(net: Network) -> VoltageState:
    """|V| = 1, theta = 0, except held set-points at PV (|V|) and slack (|V|, theta)."""
    v = np.ones(net.n_bus)
    theta = np.zeros(net.n_bus)
    for i, b in enumerate(net.buses):
        if b.kind is not BusKind.PQ:
            v[i] = b.v_setpoint
        if b.kind is BusKind.SLACK:
            theta[i] = b.theta_setpoint
    return VoltageState(v, theta)


def _power(ybus: AdmittanceMatrix, state: VoltageState) -> np.ndarray:
    V = state.complex
    return V * np.conj(ybus.matrix @ V)


def compute_injections(ybus: AdmittanceMatrix, state: VoltageState) -> InjectionVector:
    if ybus.n != state.v.shape[0]:
        raise ValueError(f"state has {state.v.shape[0]} buses, Y-bus has {ybus.n}")
    s = _power(ybus, state)
    return InjectionVector(s.real.copy(), s.imag.copy())


def _index_sets(kinds) -> tuple[np.ndarray, np.ndarray]:
    kinds = list(kinds)
    non_slack = np.array([i for i, k in enumerate(kinds) if k is not BusKind.SLACK], dtype=np.int64)
    pq = np.array([i for i, k in enumerate(kinds) if k is BusKind.PQ], dtype=np.int64)
    return non_slack, pq


def compute_mismatch(net: Network, ybus: AdmittanceMatrix, state: VoltageState) -> np.ndarray:
    """Specified minus computed: dP at non-slack buses then dQ at PQ buses."""
    p_spec, q_spec = net.specified_injections()
    inj = compute_injections(ybus, state)
    non_slack, pq = _index_sets(net.kinds)
    return np.concatenate([p_spec[non_slack] - inj.p[non_slack], q_spec[pq] - inj.q[pq]])


def build_jacobian(ybus: AdmittanceMatrix, state: VoltageState, kinds) -> Jacobian:
    """Analytic d(P, Q)/d(theta, |V|) restricted to the unknowns.

    Entries follow the Y-bus sparsity pattern; rows are [P non-slack, Q PQ],
    columns [theta non-slack, |V| PQ].
    """
    rows, cols, y = ybus.entries()
    V = state.complex
    vm = state.v
    ibus = ybus.matrix @ V
    unit = V / vm
    # complex power derivatives per stored entry (i, k)
    ds_dth = -1j * V[rows] * np.conj(y * V[cols])
    ds_dvm = V[rows] * np.conj(y * unit[cols])
    diag = rows == cols
    ds_dth[diag] += 1j * V[rows[diag]] * np.conj(ibus[rows[diag]])
    ds_dvm[diag] += np.conj(ibus[rows[diag]]) * unit[rows[diag]]

    non_slack, pq = _index_sets(kinds)
    n = vm.shape[0]
    n_th = len(non_slack)
    pos_th = np.full(n, -1)
    pos_th[non_slack] = np.arange(n_th)
    pos_v = np.full(n, -1)
    pos_v[pq] = np.arange(len(pq))
    dim = n_th + len(pq)

    blocks = (
        (pos_th[rows], pos_th[cols], ds_dth.real, 0, 0),
        (pos_th[rows], pos_v[cols], ds_dvm.real, 0, n_th),
        (pos_v[rows], pos_th[cols], ds_dth.imag, n_th, 0),
        (pos_v[rows], pos_v[cols], ds_dvm.imag, n_th, n_th),
    )
    r_all, c_all, d_all = [], [], []
    for r, c, d, r0, c0 in blocks:
        keep = (r >= 0) & (c >= 0)
        r_all.append(r[keep] + r0)
        c_all.append(c[keep] + c0)
        d_all.append(d[keep])
    J = sp.csc_matrix(
        (np.concatenate(d_all), (np.concatenate(r_all), np.concatenate(c_all))), shape=(dim, dim)
    )
    return Jacobian(J, non_slack, pq)


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 50
    initial: VoltageState | None = None


def nr_solve(net: Network, options: SolverOptions | None = None, ybus: AdmittanceMatrix | None = None) -> PFSolution:
    """Full Newton-Raphson from flat start (or ``options.initial``).

    Returns a non-converged solution rather than raising when the iteration
    cap is hit or |V| leaves the plausibility band.
    """
    opts = options or SolverOptions()
    comps = check_connectivity(net)
    if len(comps) != 1:
        raise DisconnectedNetworkError(f"network splits into {len(comps)} islands")
    ybus = ybus if ybus is not None else build_ybus(net)
    state = opts.initial if opts.initial is not None else flat_start(net)
    v = state.v.copy()
    theta = state.theta.copy()
    non_slack, pq = _index_sets(net.kinds)
    n_th = len(non_slack)

    def mismatch_at(v, theta):
        return compute_mismatch(net, ybus, VoltageState(v, theta))

    f = mismatch_at(v, theta)
    err = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    converged = err <= opts.tolerance
    while not converged and it < opts.max_iterations:
        it += 1
        J = build_jacobian(ybus, VoltageState(v, theta), net.kinds).matrix
        try:
            dx = splu(J).solve(f)
        except RuntimeError as exc:
            raise SolverError(f"singular Jacobian at iteration {it}: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise SolverError(f"singular Jacobian at iteration {it}")
        theta[non_slack] += dx[:n_th]
        v[pq] += dx[n_th:]
        if np.any(v <= V_MIN) or np.any(v >= V_MAX):
            logger.debug("voltage left (%g, %g) at iteration %d", V_MIN, V_MAX, it)
            err = float("inf")
            break
        f = mismatch_at(v, theta)
        err = float(np.max(np.abs(f)))
        converged = err <= opts.tolerance
    if not converged:
        last = VoltageState(v, theta) if np.all(v > 0) and np.all(np.isfinite(v)) else state
        return PFSolution(last, it, err, False, float("nan"), float("nan"))
    final = VoltageState(v, theta)
    inj = compute_injections(ybus, final)
    s = net.slack
    # slack generation = net injection + local demand
    slack_p = float(inj.p[s] + net.buses[s].p_demand)
    slack_q = float(inj.q[s] + net.buses[s].q_demand)
    return PFSolution(final, it, err, True, slack_p, slack_q)


def bus_generation(net: Network, sol: PFSolution, ybus: AdmittanceMatrix | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus active/reactive generation implied by the solved state."""
    ybus = ybus if ybus is not None else build_ybus(net)
    inj = compute_injections(ybus, sol.state)
    pd = np.array([b.p_demand for b in net.buses])
    qd = np.array([b.q_demand for b in net.buses])
    return inj.p + pd, inj.q + qd


def branch_losses(net: Network, state: VoltageState) -> float:
    """Total active losses: branch series/charging losses plus shunt conductance."""
    V = state.complex
    total = 0.0
    for br in net.branches:
        if not br.in_service:
            continue
        yff, yft, ytf, ytt = branch_admittances(br)
        vf, vt = V[br.from_bus], V[br.to_bus]
        sf = vf * np.conj(yff * vf + yft * vt)
        st = vt * np.conj(ytf * vf + ytt * vt)
        total += (sf + st).real
    for i, b in enumerate(net.buses):
        total += b.shunt_g * state.v[i] ** 2
    return float(total)
