"""Averaged-inverter model of an islanded AC microgrid.

Every DG is simulated in its own dq frame rotating at its droop frequency.
Per DG the state holds the LC filter and coupling-inductor currents and
voltages, the voltage/current PI integrators, the low-pass filtered powers,
the two secondary-control corrections and the angle of the local frame
against the common frame (which rotates with DG 1).

The electrical network behind the coupling inductors is solved
quasi-statically: bus voltages follow from the injected currents through the
nodal admittance matrix evaluated at the common frequency.

The hot path (:func:`_rk4_advance`) is compiled with numba; the public
functions below wrap the same compiled kernels so both routes stay in sync.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from numba import njit

# Column layout of the per-DG state matrix ``X`` (shape ``(N, N_STATE)``).
I_ID, I_IQ, V_OD, V_OQ, I_OD, I_OQ = 0, 1, 2, 3, 4, 5
PHI_D, PHI_Q, GAM_D, GAM_Q = 6, 7, 8, 9
P_F, Q_F, D_OMEGA, D_V, ANGLE = 10, 11, 12, 13, 14
N_STATE = 15

# Column layout of the packed per-DG parameter matrix.
_R_F, _L_F, _C_F, _R_C, _L_C, _M_P, _N_Q, _W_N, _V_N = range(9)
_K_PV, _K_IV, _K_PI, _K_II, _K1, _K2, _G = range(9, 16)
_N_PAR = 16

DEFAULT_DT = 1e-4
DEFAULT_OMEGA_C = 31.4


class ConfigError(ValueError):
    """Invalid system, network or scenario configuration."""


class SimulationDiverged(RuntimeError):
    """A state entry became non-finite during integration."""

    def __init__(self, t, detail=""):
        self.t = float(t)
        msg = f"simulation diverged at t={self.t:.6f} s"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(frozen=True)
class DgParams:
    """Electrical parameters of one inverter-interfaced DG (SI units)."""

    R_f: float = 0.1
    L_f: float = 4e-3
    C_f: float = 200e-6
    R_c: float = 0.1
    L_c: float = 1.5e-3
    m_P: float = 1e-4
    n_Q: float = 1e-4
    S_rating: float = 10e3
    omega_n: float = 2 * math.pi * 50
    v_odn: float = 380.0
    V_dc: float = 1000.0
    f_sw: float = 10e3  # metadata only, the inverter is averaged

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"DgParams.{f.name} must be finite and > 0, got {v!r}")


@dataclass(frozen=True)
class ControlGains:
    K_Pv: float = 0.5
    K_Iv: float = 390.0
    K_Pi: float = 10.5
    K_Ii: float = 16000.0
    K1: float = 1.0
    K2: float = 1.0

    def __post_init__(self):
        for name in ("K_Pv", "K_Iv", "K_Pi", "K_Ii"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"ControlGains.{name} must be > 0, got {v!r}")
        # K1 = K2 = 0 is allowed: it switches secondary control off.
        if not (self.K1 >= 0 and self.K2 >= 0):
            raise ConfigError("consensus gains must be >= 0")
        if self.K1 != self.K2:
            raise ConfigError(f"consensus gains must satisfy K1 == K2 (got {self.K1}, {self.K2})")


@dataclass
class DgState:
    """Continuous state of one DG; mirrors one row of the state matrix."""

    i_id: float = 0.0
    i_iq: float = 0.0
    v_od: float = 0.0
    v_oq: float = 0.0
    i_od: float = 0.0
    i_oq: float = 0.0
    Phi_d: float = 0.0
    Phi_q: float = 0.0
    gamma_d: float = 0.0
    gamma_q: float = 0.0
    P: float = 0.0
    Q: float = 0.0
    delta_omega: float = 0.0
    delta_v: float = 0.0
    delta_angle: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, row) -> "DgState":
        return cls(*(float(x) for x in row))


@dataclass(frozen=True)
class NetworkModel:
    """Electrical network behind the DG coupling inductors.

    ``lines`` are ``(from_bus, to_bus, R, L)`` and ``loads`` are shunt series
    RL branches ``(bus, R, L)``. ``dg_bus[k]`` is the bus DG ``k`` feeds.
    """

    n_bus: int
    lines: tuple
    loads: tuple
    dg_bus: tuple

    def __post_init__(self):
        if self.n_bus < 1:
            raise ConfigError("network needs at least one bus")
        for f, t, r, l in self.lines:
            if not (0 <= f < self.n_bus and 0 <= t < self.n_bus) or f == t:
                raise ConfigError(f"bad line endpoints ({f}, {t})")
            if not (r > 0 and l > 0):
                raise ConfigError(f"line ({f}, {t}) impedance must be positive")
        if not self.loads:
            raise ConfigError("network needs at least one load")
        for b, r, l in self.loads:
            if not 0 <= b < self.n_bus:
                raise ConfigError(f"load bus {b} out of range")
            if not (r > 0 and l >= 0):
                raise ConfigError(f"load at bus {b}: R must be > 0 and L >= 0")
        for b in self.dg_bus:
            if not 0 <= b < self.n_bus:
                raise ConfigError(f"DG bus {b} out of range")
        # connectivity by union-find over the line list
        parent = list(range(self.n_bus))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f, t, _, _ in self.lines:
            parent[find(f)] = find(t)
        if len({find(b) for b in range(self.n_bus)}) != 1:
            raise ConfigError("electrical network is not connected")

    @property
    def n_dg(self) -> int:
        return len(self.dg_bus)

    def arrays(self):
        """Flat numpy arrays consumed by the compiled kernels."""
        lines = np.array(self.lines, dtype=float).reshape(-1, 4)
        loads = np.array(self.loads, dtype=float).reshape(-1, 3)
        return (
            lines[:, 0].astype(np.int64), lines[:, 1].astype(np.int64),
            lines[:, 2].copy(), lines[:, 3].copy(),
            loads[:, 0].astype(np.int64), loads[:, 1].copy(), loads[:, 2].copy(),
            np.array(self.dg_bus, dtype=np.int64),
        )


LINE_TYPE_I = (0.1, 1.5e-3)
LINE_TYPE_II = (0.07, 0.5e-3)


def default_network(load_R=12.0, load_L=3e-3) -> NetworkModel:
    """Four-bus radial feeder DG1-DG2-DG3-DG4 with RL loads at buses 1 and 3."""
    r1, l1 = LINE_TYPE_I
    r2, l2 = LINE_TYPE_II
    return NetworkModel(
        n_bus=4,
        lines=((0, 1, r1, l1), (1, 2, r2, l2), (2, 3, r1, l1)),
        loads=((0, load_R, load_L), (2, load_R, load_L)),
        dg_bus=(0, 1, 2, 3),
    )


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _droop(P, Q, omega_n, v_odn, m_P, n_Q, d_omega, d_v):
    return omega_n - m_P * P + d_omega, v_odn - n_Q * Q + d_v


@njit(cache=True)
def _voltage_loop(v_od, v_oq, i_od, i_oq, phi_d, phi_q, omega, v_od_s, v_oq_s, C_f, K_Pv, K_Iv):
    e_d = v_od_s - v_od
    e_q = v_oq_s - v_oq
    i_id_s = i_od - omega * C_f * v_oq + K_Pv * e_d + K_Iv * phi_d
    i_iq_s = i_oq + omega * C_f * v_od + K_Pv * e_q + K_Iv * phi_q
    return i_id_s, i_iq_s, e_d, e_q


@njit(cache=True)
def _current_loop(i_id, i_iq, v_od, v_oq, gam_d, gam_q, omega, i_id_s, i_iq_s, L_f, K_Pi, K_Ii):
    e_d = i_id_s - i_id
    e_q = i_iq_s - i_iq
    v_id_s = v_od - omega * L_f * i_iq + K_Pi * e_d + K_Ii * gam_d
    v_iq_s = v_oq + omega * L_f * i_id + K_Pi * e_q + K_Ii * gam_q
    return v_id_s, v_iq_s, e_d, e_q


@njit(cache=True)
def _plant(i_id, i_iq, v_od, v_oq, i_od, i_oq, v_id, v_iq, v_bd, v_bq, omega,
           R_f, L_f, C_f, R_c, L_c):
    d0 = -R_f / L_f * i_id + omega * i_iq + (v_id - v_od) / L_f
    d1 = -R_f / L_f * i_iq - omega * i_id + (v_iq - v_oq) / L_f
    d2 = omega * v_oq + (i_id - i_od) / C_f
    d3 = -omega * v_od + (i_iq - i_oq) / C_f
    d4 = -R_c / L_c * i_od + omega * i_oq + (v_od - v_bd) / L_c
    d5 = -R_c / L_c * i_oq - omega * i_od + (v_oq - v_bq) / L_c
    return d0, d1, d2, d3, d4, d5


@njit(cache=True)
def _inst_power(v_od, v_oq, i_od, i_oq):
    return 1.5 * (v_od * i_od + v_oq * i_oq), 1.5 * (v_oq * i_od - v_od * i_oq)


@njit(cache=True)
def _admittance(n_bus, lf, lt, lr, ll, db, dr, dl, omega):
    Y = np.zeros((n_bus, n_bus), dtype=np.complex128)
    for i in range(lf.shape[0]):
        y = 1.0 / complex(lr[i], omega * ll[i])
        a, b = lf[i], lt[i]
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    for i in range(db.shape[0]):
        Y[db[i], db[i]] += 1.0 / complex(dr[i], omega * dl[i])
    return Y


@njit(cache=True)
def _bus_voltages(i_d, i_q, ang, Z, dg_bus, v_d, v_q):
    """Common-frame nodal solve ``V = Z I``, rotated back into each DG frame."""
    n_bus = Z.shape[0]
    n = i_d.shape[0]
    inj = np.zeros(n_bus, dtype=np.complex128)
    for k in range(n):
        inj[dg_bus[k]] += complex(i_d[k], i_q[k]) * complex(math.cos(ang[k]), math.sin(ang[k]))
    V = Z @ inj
    for k in range(n):
        v = V[dg_bus[k]] * complex(math.cos(ang[k]), -math.sin(ang[k]))
        v_d[k] = v.real
        v_q[k] = v.imag


@njit(cache=True)
def _consensus(k, omega_k, mpP_k, nqQ_k, recv, link, g_k, omega_n, K1, K2):
    s_w = 0.0
    s_v = 0.0
    for l in range(link.shape[1]):
        s = link[k, l]
        if s != 0.0:
            s_w += s * (recv[k, l, 0] - omega_k) + s * (recv[k, l, 1] - mpP_k)
            s_v += s * (recv[k, l, 2] - nqQ_k)
    return K1 * (s_w + g_k * (omega_n - omega_k)), K2 * s_v


@njit(cache=True)
def _derivs(X, par, recv, link, Z, dg_bus, omega_c, out):
    n = X.shape[0]
    v_bd = np.empty(n)
    v_bq = np.empty(n)
    _bus_voltages(X[:, I_OD], X[:, I_OQ], X[:, ANGLE], Z, dg_bus, v_bd, v_bq)
    omega_ref = par[0, _W_N] - par[0, _M_P] * X[0, P_F] + X[0, D_OMEGA]
    for k in range(n):
        x = X[k]
        p = par[k]
        omega, v_s = _droop(x[P_F], x[Q_F], p[_W_N], p[_V_N], p[_M_P], p[_N_Q], x[D_OMEGA], x[D_V])
        i_id_s, i_iq_s, dphi_d, dphi_q = _voltage_loop(
            x[V_OD], x[V_OQ], x[I_OD], x[I_OQ], x[PHI_D], x[PHI_Q], omega, v_s, 0.0,
            p[_C_F], p[_K_PV], p[_K_IV])
        v_id, v_iq, dgam_d, dgam_q = _current_loop(
            x[I_ID], x[I_IQ], x[V_OD], x[V_OQ], x[GAM_D], x[GAM_Q], omega, i_id_s, i_iq_s,
            p[_L_F], p[_K_PI], p[_K_II])
        d = _plant(x[I_ID], x[I_IQ], x[V_OD], x[V_OQ], x[I_OD], x[I_OQ], v_id, v_iq,
                   v_bd[k], v_bq[k], omega, p[_R_F], p[_L_F], p[_C_F], p[_R_C], p[_L_C])
        for j in range(6):
            out[k, j] = d[j]
        out[k, PHI_D] = dphi_d
        out[k, PHI_Q] = dphi_q
        out[k, GAM_D] = dgam_d
        out[k, GAM_Q] = dgam_q
        p_i, q_i = _inst_power(x[V_OD], x[V_OQ], x[I_OD], x[I_OQ])
        out[k, P_F] = omega_c * (p_i - x[P_F])
        out[k, Q_F] = omega_c * (q_i - x[Q_F])
        dw, dv = _consensus(k, omega, p[_M_P] * x[P_F], p[_N_Q] * x[Q_F], recv, link,
                            p[_G], p[_W_N], p[_K1], p[_K2])
        out[k, D_OMEGA] = dw
        out[k, D_V] = dv
        out[k, ANGLE] = omega - omega_ref


@njit(cache=True)
def _rk4_advance(X, n_steps, dt, t0, par, recv, link, net_lf, net_lt, net_lr, net_ll,
                 net_db, net_dr, net_dl, dg_bus, n_bus, omega_c, log_every, log):
    """Advance ``X`` in place by ``n_steps`` RK4 steps.

    Returns the number of completed steps; a value below ``n_steps`` means a
    non-finite entry appeared after that many steps. When ``log_every > 0``
    the state after every ``log_every``-th step is copied into ``log``.
    """
    n = X.shape[0]
    k1 = np.empty_like(X)
    k2 = np.empty_like(X)
    k3 = np.empty_like(X)
    k4 = np.empty_like(X)
    tmp = np.empty_like(X)
    row = 0
    for step in range(n_steps):
        omega_com = par[0, _W_N] - par[0, _M_P] * X[0, P_F] + X[0, D_OMEGA]
        Y = _admittance(n_bus, net_lf, net_lt, net_lr, net_ll, net_db, net_dr, net_dl, omega_com)
        Z = np.linalg.inv(Y)
        _derivs(X, par, recv, link, Z, dg_bus, omega_c, k1)
        for i in range(n):
            for j in range(N_STATE):
                tmp[i, j] = X[i, j] + 0.5 * dt * k1[i, j]
        _derivs(tmp, par, recv, link, Z, dg_bus, omega_c, k2)
        for i in range(n):
            for j in range(N_STATE):
                tmp[i, j] = X[i, j] + 0.5 * dt * k2[i, j]
        _derivs(tmp, par, recv, link, Z, dg_bus, omega_c, k3)
        for i in range(n):
            for j in range(N_STATE):
                tmp[i, j] = X[i, j] + dt * k3[i, j]
        _derivs(tmp, par, recv, link, Z, dg_bus, omega_c, k4)
        finite = True
        for i in range(n):
            for j in range(N_STATE):
                X[i, j] += dt / 6.0 * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
                if not np.isfinite(X[i, j]):
                    finite = False
        if not finite:
            return step
        if log_every > 0 and (step + 1) % log_every == 0:
            log[row, 0, 0] = t0 + (step + 1) * dt
            for i in range(n):
                for j in range(N_STATE):
                    log[row, i, j + 1] = X[i, j]
            row += 1
    return n_steps


# --------------------------------------------------------------------------
# public operations


def droop_setpoints(P, Q, params: DgParams, delta_omega=0.0, delta_v=0.0):
    """Droop references with the secondary corrections added.

    Returns ``(omega_star, v_od_star)``.
    """
    return _droop(float(P), float(Q), params.omega_n, params.v_odn, params.m_P, params.n_Q,
                  float(delta_omega), float(delta_v))


def compute_droop_coeffs(delta_omega_th, delta_v_th, ratings):
    """Droop coefficients that make every DG hit the thresholds at its rating."""
    if not (delta_omega_th > 0 and delta_v_th > 0):
        raise ConfigError("deviation thresholds must be positive")
    ratings = [float(r) for r in ratings]
    if any(not (r > 0) for r in ratings):
        raise ConfigError(f"ratings must be positive, got {ratings}")
    return [delta_omega_th / r for r in ratings], [delta_v_th / r for r in ratings]


def voltage_loop(state: DgState, omega, v_od_star, v_oq_star, gains: ControlGains, params: DgParams):
    """Outer voltage PI. Returns ``(i_id_star, i_iq_star, Phi_dot_d, Phi_dot_q)``."""
    return _voltage_loop(state.v_od, state.v_oq, state.i_od, state.i_oq, state.Phi_d,
                         state.Phi_q, float(omega), float(v_od_star), float(v_oq_star),
                         params.C_f, gains.K_Pv, gains.K_Iv)


def current_loop(state: DgState, omega, i_id_star, i_iq_star, gains: ControlGains, params: DgParams):
    """Inner current PI. Returns ``(v_id_star, v_iq_star, gamma_dot_d, gamma_dot_q)``.

    The integrators track the inverter-side currents ``i_id``/``i_iq``.
    """
    return _current_loop(state.i_id, state.i_iq, state.v_od, state.v_oq, state.gamma_d,
                         state.gamma_q, float(omega), float(i_id_star), float(i_iq_star),
                         params.L_f, gains.K_Pi, gains.K_Ii)


def plant_derivatives(state: DgState, v_id, v_iq, v_bd, v_bq, omega, params: DgParams) -> np.ndarray:
    """Time derivatives of ``[i_id, i_iq, v_od, v_oq, i_od, i_oq]``."""
    return np.array(_plant(state.i_id, state.i_iq, state.v_od, state.v_oq, state.i_od,
                           state.i_oq, float(v_id), float(v_iq), float(v_bd), float(v_bq),
                           float(omega), params.R_f, params.L_f, params.C_f, params.R_c,
                           params.L_c))


def measure_power(v_od, v_oq, i_od, i_oq, prev_P, prev_Q, dt, omega_c=DEFAULT_OMEGA_C):
    """One exact step of the first-order power filter over ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    p, q = _inst_power(float(v_od), float(v_oq), float(i_od), float(i_oq))
    a = 1.0 - math.exp(-omega_c * dt)
    return prev_P + a * (p - prev_P), prev_Q + a * (q - prev_Q)


def network_solve(dg_currents, angles, net: NetworkModel, omega_common):
    """Bus voltage seen by each DG, in that DG's own dq frame.

    ``dg_currents`` is ``(N, 2)`` of ``(i_od, i_oq)``; returns ``(N, 2)`` of
    ``(v_bd, v_bq)``.
    """
    cur = np.asarray(dg_currents, dtype=float).reshape(-1, 2)
    ang = np.asarray(angles, dtype=float)
    if cur.shape[0] != net.n_dg or ang.shape[0] != net.n_dg:
        raise ConfigError("current/angle arrays do not match the DG count")
    lf, lt, lr, ll, db, dr, dl, dg_bus = net.arrays()
    Y = _admittance(net.n_bus, lf, lt, lr, ll, db, dr, dl, float(omega_common))
    if np.linalg.cond(Y) > 1e12:
        raise ConfigError("nodal admittance matrix is singular")
    Z = np.linalg.inv(Y)
    v_d = np.empty(net.n_dg)
    v_q = np.empty(net.n_dg)
    _bus_voltages(np.ascontiguousarray(cur[:, 0]), np.ascontiguousarray(cur[:, 1]),
                  np.ascontiguousarray(ang), Z, dg_bus, v_d, v_q)
    return np.column_stack([v_d, v_q])


def nodal_residual(dg_currents, angles, net: NetworkModel, omega_common):
    """Max current-balance mismatch ``|Y V - I|`` over buses, for diagnostics."""
    cur = np.asarray(dg_currents, dtype=float).reshape(-1, 2)
    ang = np.asarray(angles, dtype=float)
    lf, lt, lr, ll, db, dr, dl, dg_bus = net.arrays()
    Y = _admittance(net.n_bus, lf, lt, lr, ll, db, dr, dl, float(omega_common))
    inj = np.zeros(net.n_bus, dtype=complex)
    for k in range(net.n_dg):
        inj[dg_bus[k]] += complex(cur[k, 0], cur[k, 1]) * np.exp(1j * ang[k])
    V = np.linalg.solve(Y, inj)
    return float(np.max(np.abs(Y @ V - inj)))


@dataclass
class Microgrid:
    """A configured N-DG microgrid with its packed parameter arrays.

    ``recv[k, l]`` is the ``(omega, m_P*P, n_Q*Q)`` tuple DG ``k`` last
    received from DG ``l``; ``link[k, l]`` weights that term in the consensus
    sum (the active adjacency, possibly with links dropped by a detector).
    """

    params: list
    gains: ControlGains
    network: NetworkModel
    pinning: np.ndarray
    omega_c: float = DEFAULT_OMEGA_C
    dt: float = DEFAULT_DT
    _par: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.params = list(self.params)
        n = len(self.params)
        if n != self.network.n_dg:
            raise ConfigError(f"{n} DG parameter sets but network maps {self.network.n_dg} DGs")
        self.pinning = np.asarray(self.pinning, dtype=float)
        if self.pinning.shape != (n,) or np.any(self.pinning < 0) or not np.any(self.pinning > 0):
            raise ConfigError("pinning gains must be >= 0 with at least one positive entry")
        if not (self.dt > 0 and self.omega_c > 0):
            raise ConfigError("dt and omega_c must be positive")
        self._net = self.network.arrays()
        self._build_par()

    def _build_par(self):
        n = len(self.params)
        par = np.zeros((n, _N_PAR))
        for k, p in enumerate(self.params):
            par[k, :9] = (p.R_f, p.L_f, p.C_f, p.R_c, p.L_c, p.m_P, p.n_Q, p.omega_n, p.v_odn)
            g = self.gains
            par[k, 9:15] = (g.K_Pv, g.K_Iv, g.K_Pi, g.K_Ii, g.K1, g.K2)
            par[k, _G] = self.pinning[k]
        self._par = par

    def with_gains(self, gains: ControlGains) -> "Microgrid":
        return Microgrid(self.params, gains, self.network, self.pinning.copy(), self.omega_c, self.dt)

    @property
    def n(self) -> int:
        return len(self.params)

    @property
    def omega_n(self) -> float:
        return self.params[0].omega_n

    @property
    def m_P(self) -> np.ndarray:
        return self._par[:, _M_P].copy()

    @property
    def n_Q(self) -> np.ndarray:
        return self._par[:, _N_Q].copy()

    def initial_state(self) -> np.ndarray:
        """Black-start state: filter capacitors charged to nominal voltage, no current."""
        X = np.zeros((self.n, N_STATE))
        X[:, V_OD] = self._par[:, _V_N]
        return X

    def frequencies(self, X) -> np.ndarray:
        return self._par[:, _W_N] - self._par[:, _M_P] * X[:, P_F] + X[:, D_OMEGA]

    def shared_values(self, X) -> np.ndarray:
        """The ``(omega, m_P*P, n_Q*Q)`` tuple each DG broadcasts, shape ``(N, 3)``."""
        return np.column_stack([self.frequencies(X), self._par[:, _M_P] * X[:, P_F],
                                self._par[:, _N_Q] * X[:, Q_F]])

    def honest_packets(self, X) -> np.ndarray:
        """``recv`` array for untampered communication."""
        sv = self.shared_values(X)
        return np.ascontiguousarray(np.broadcast_to(sv[None, :, :], (self.n, self.n, 3)))

    def impedance(self, omega_common) -> np.ndarray:
        lf, lt, lr, ll, db, dr, dl, _ = self._net
        return np.linalg.inv(_admittance(self.network.n_bus, lf, lt, lr, ll, db, dr, dl,
                                         float(omega_common)))

    def derivatives(self, X, recv, link) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        out = np.empty_like(X)
        Z = self.impedance(self.frequencies(X)[0])
        _derivs(X, self._par, np.ascontiguousarray(recv, dtype=float),
                np.ascontiguousarray(link, dtype=float), Z, self._net[7], self.omega_c, out)
        return out

    def advance(self, X, n_steps, recv, link, t0=0.0, log_every=0):
        """Run ``n_steps`` RK4 steps from ``X`` (not modified).

        Returns ``(X_next, log)`` where ``log`` has shape
        ``(n_steps // log_every, N, 1 + N_STATE)`` with time in ``[:, 0, 0]``.
        """
        X = np.array(X, dtype=float, order="C")
        n_log = n_steps // log_every if log_every > 0 else 0
        log = np.zeros((n_log, self.n, 1 + N_STATE))
        lf, lt, lr, ll, db, dr, dl, dg_bus = self._net
        done = _rk4_advance(X, int(n_steps), self.dt, float(t0), self._par,
                            np.ascontiguousarray(recv, dtype=float),
                            np.ascontiguousarray(link, dtype=float),
                            lf, lt, lr, ll, db, dr, dl, dg_bus, self.network.n_bus,
                            self.omega_c, int(log_every), log)
        if done < n_steps:
            raise SimulationDiverged(t0 + (done + 1) * self.dt, "non-finite state")
        return X, log

    def run(self, X, duration, S, t0=0.0, comm_period=0.01, log_every=0, recv_fn=None):
        """Benign closed-loop run with communication refreshed every ``comm_period``.

        ``recv_fn(X, t)`` may replace the honest packet exchange.
        Returns ``(X, log)``.
        """
        steps_per_comm = int(round(comm_period / self.dt))
        n_comm = int(round(duration / comm_period))
        link = np.asarray(S, dtype=float)
        logs = []
        t = t0
        for _ in range(n_comm):
            recv = recv_fn(X, t) if recv_fn else self.honest_packets(X)
            X, log = self.advance(X, steps_per_comm, recv, link, t0=t, log_every=log_every)
            if log_every:
                logs.append(log)
            t += steps_per_comm * self.dt
        log = np.concatenate(logs) if logs else np.zeros((0, self.n, 1 + N_STATE))
        return X, log


def integrate_step(grid: Microgrid, X, dt=None, recv=None, link=None):
    """One classical RK4 step of the full system.

    ``recv``/``link`` default to honest communication with no active links.
    Raises :class:`SimulationDiverged` on a non-finite result.
    """
    if dt is not None and dt != grid.dt:
        grid = Microgrid(grid.params, grid.gains, grid.network, grid.pinning, grid.omega_c, dt)
    if not grid.dt > 0:
        raise ValueError("dt must be positive")
    if recv is None:
        recv = grid.honest_packets(X)
    if link is None:
        link = np.zeros((grid.n, grid.n))
    return grid.advance(X, 1, recv, link)[0]
