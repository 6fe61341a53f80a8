"""Zero-sum attacker/defender game on top of the microgrid simulation.

One call to :meth:`MicrogridGame.step` is one decision epoch: the defender's
topology is applied, due attack stages are activated, the physics runs for
``config.epoch`` seconds with packets exchanged every ``comm_period``, then
both utilities are scored and persistent anomalies are scanned.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .consensus import CommTopology
from .dynamics import (D_OMEGA, D_V, P_F, Q_F, V_OD, ConfigError, Microgrid,
                       SimulationDiverged)
from .threat import (AttackSchedule, AttackState, activate_stage, inject,
                     is_neutralized, remove_malware)

log = logging.getLogger(__name__)

MONITORED = ("omega", "v_od", "power")


@dataclass(frozen=True)
class GameConfig:
    """Utility weights and epoch bookkeeping.

    ``p_n`` optionally overrides the per-channel nominal magnitudes of the
    monitored channels; by default they come from the settled benign
    operating point. ``osc_floor`` is the hysteresis band used when counting
    oscillations, as a fraction of the channel nominal.
    """

    sigma_unit: float = 1.0
    rho: float = 0.001
    n_P: int = 3
    gamma: float = 0.95
    p_n: tuple | None = None
    osc_window: float = 0.1
    osc_floor: float = 1e-4
    anomaly_threshold: float = 1e-3
    scan_after: int = 2
    auto_scan: bool = True
    stealth_fraction: float = 0.05
    comm_period: float = 0.01
    sample_period: float = 1e-3
    settle_time: float = 6.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0 < self.rho < 1:
            raise ConfigError(f"rho must be in (0, 1), got {self.rho}")
        if not (isinstance(self.n_P, int) and 1 <= self.n_P <= len(MONITORED)):
            raise ConfigError(f"n_P must be an integer in [1, {len(MONITORED)}]")
        if self.sigma_unit < 0:
            raise ConfigError("sigma_unit must be >= 0")
        if not 0 < self.stealth_fraction < 1:
            raise ConfigError("stealth_fraction must be in (0, 1)")
        if self.scan_after < 1:
            raise ConfigError("scan_after must be >= 1")
        for name in ("osc_window", "comm_period", "sample_period", "settle_time"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.osc_floor < 0 or self.anomaly_threshold <= 0:
            raise ConfigError("osc_floor must be >= 0 and anomaly_threshold > 0")
        if self.p_n is not None and (len(self.p_n) != self.n_P or min(self.p_n) <= 0):
            raise ConfigError("p_n override needs n_P positive entries")

    @property
    def epoch(self) -> float:
        return self.osc_window


def relative_error(p_c, p_n):
    """``|p_c - p_n| / p_n``."""
    p_n_arr = np.asarray(p_n, dtype=float)
    if np.any(p_n_arr <= 0):
        raise ConfigError("nominal magnitude must be positive")
    r = np.abs(np.asarray(p_c, dtype=float) - p_n_arr) / p_n_arr
    return float(r) if np.ndim(r) == 0 else r


def count_oscillations(samples, floor=None):
    """Number of oscillation cycles and their mean peak-to-peak size.

    The signal is detrended by the straight line joining its end points. A
    half-cycle is a run of samples on one side of that line by more than
    ``floor`` (default: 1e-6 of the largest magnitude); each pair of
    consecutive half-cycles is one cycle.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("empty sample window")
    if n < 3:
        return 0, 0.0
    h = 1e-6 * float(np.max(np.abs(x))) if floor is None else float(floor)
    r = x - (x[0] + (x[-1] - x[0]) * np.arange(n) / (n - 1))
    s = np.where(r > h, 1, np.where(r < -h, -1, 0))
    nz = np.flatnonzero(s)
    if nz.size == 0:
        return 0, 0.0
    sig = s[nz]
    starts = np.concatenate([nz[:1], nz[1:][sig[1:] != sig[:-1]]])
    z = starts.size // 2
    if z == 0:
        return 0, 0.0
    edges = np.append(starts, n)
    peaks = np.empty(starts.size)
    for i in range(starts.size):
        seg = r[edges[i]:edges[i + 1]]
        peaks[i] = seg.max() if s[starts[i]] > 0 else seg.min()
    pp = np.abs(peaks[0:2 * z:2] - peaks[1:2 * z:2])
    return int(z), float(pp.mean())


def link_counts(topology: CommTopology, Theta):
    """``(N_l, N_c, C_c)``: active directed links, compromised DGs and their links."""
    n = topology.n
    N_l = int(np.count_nonzero(topology.S))
    if N_l > n * n - n:
        raise AssertionError(f"{N_l} active links exceed the bound {n * n - n}")
    N_c = int(np.sum(np.asarray(Theta) != 0))
    return N_l, N_c, N_c * (n - 1)


def _deviation_terms(z, p_a, p_n, p_r):
    z = np.asarray(z, dtype=float)
    return float(np.sum(z * np.asarray(p_a, dtype=float) / np.asarray(p_n, dtype=float))
                 + np.sum(np.asarray(p_r, dtype=float)))


def attacker_utility(sum_delta, z, p_a, p_n, p_r, N_l, sigma, rho) -> float:
    """Attacker's stage payoff ``U_R``.

    ``z``, ``p_a``, ``p_n`` and ``p_r`` are ``(N, n_P)`` arrays (per DG and
    monitored channel); ``sum_delta`` is the already-normalized secondary
    correction magnitude summed over DGs.
    """
    return float(sum_delta) + _deviation_terms(z, p_a, p_n, p_r) + rho * N_l - float(sigma)


def defender_utility(sum_delta, z, p_a, p_n, p_r, N_l, sigma, rho) -> float:
    """Defender's stage payoff, the exact negation of :func:`attacker_utility`."""
    return -attacker_utility(sum_delta, z, p_a, p_n, p_r, N_l, sigma, rho)


@dataclass
class UtilityBreakdown:
    sum_delta: float
    z: np.ndarray
    p_a: np.ndarray
    p_n: np.ndarray
    p_c: np.ndarray
    p_r: np.ndarray
    N_l: int
    N_c: int
    C_c: int
    sigma: float
    U_R: float
    U_D: float

    @classmethod
    def compute(cls, sum_delta, z, p_a, p_n, p_c, N_l, N_c, C_c, sigma, rho):
        p_r = relative_error(p_c, p_n)
        U_R = attacker_utility(sum_delta, z, p_a, p_n, p_r, N_l, sigma, rho)
        U_D = defender_utility(sum_delta, z, p_a, p_n, p_r, N_l, sigma, rho)
        return cls(float(sum_delta), np.asarray(z), np.asarray(p_a, dtype=float),
                   np.asarray(p_n, dtype=float), np.asarray(p_c, dtype=float),
                   np.asarray(p_r, dtype=float), N_l, N_c, C_c, float(sigma), U_R, U_D)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d


@dataclass(frozen=True)
class GameState:
    """Everything the next transition depends on.

    ``flags`` are the defender's per-DG anomaly flags (sticky until the DG
    is scanned) and ``flag_age`` counts the consecutive epochs each has
    been raised.
    """

    step: int
    topology: int
    attack: AttackState
    flags: np.ndarray
    flag_age: np.ndarray
    X: np.ndarray
    next_stage: int = 0
    neutral_since: float | None = None
    cum_U_D: float = 0.0
    cum_U_R: float = 0.0

    @property
    def Theta(self):
        return self.attack.Theta

    @property
    def burned(self):
        return self.attack.burned

    def to_dict(self) -> dict:
        return {"step": self.step, "topology": self.topology, "attack": self.attack.to_dict(),
                "flags": self.flags.tolist(), "flag_age": self.flag_age.tolist(),
                "X": self.X.tolist(), "next_stage": self.next_stage,
                "neutral_since": self.neutral_since, "cum_U_D": self.cum_U_D,
                "cum_U_R": self.cum_U_R}

    @classmethod
    def from_dict(cls, d) -> "GameState":
        return cls(step=int(d["step"]), topology=int(d["topology"]),
                   attack=AttackState.from_dict(d["attack"]),
                   flags=np.array(d["flags"], dtype=np.int8),
                   flag_age=np.array(d["flag_age"], dtype=np.int64),
                   X=np.array(d["X"], dtype=float), next_stage=int(d["next_stage"]),
                   neutral_since=d["neutral_since"], cum_U_D=float(d["cum_U_D"]),
                   cum_U_R=float(d["cum_U_R"]))


@dataclass
class StepResult:
    state: GameState
    U_D: float
    breakdown: UtilityBreakdown
    samples: np.ndarray
    events: list


_REFERENCE_CACHE: dict = {}


def settle(grid: Microgrid, S, duration, comm_period=0.01) -> np.ndarray:
    """Benign operating point reached from black start on topology ``S``.

    Results are memoized on the full numeric configuration.
    """
    key_src = (grid._par.tobytes(), np.asarray(S, dtype=float).tobytes(),
               repr(grid.network), grid.dt, grid.omega_c, duration, comm_period)
    key = hashlib.sha256(repr(key_src).encode()).hexdigest()
    if key not in _REFERENCE_CACHE:
        X, _ = grid.run(grid.initial_state(), duration, S, comm_period=comm_period)
        _REFERENCE_CACHE[key] = X
    return _REFERENCE_CACHE[key].copy()


class MicrogridGame:
    """Markov environment coupling the scheduled attacker, a defender and the physics.

    ``detector`` (a static-detector callable ``(recv, nominal) -> (N, N)
    bool``) drops flagged links from the consensus sum for the rest of the
    epoch; it is how the rule-based baseline acts.
    """

    def __init__(self, grid: Microgrid, topologies, schedule: AttackSchedule,
                 config: GameConfig = GameConfig(), detector=None, initial_topology=0,
                 reference=None):
        self.grid = grid
        self.topologies = list(topologies)
        if not self.topologies or any(t.n != grid.n for t in self.topologies):
            raise ConfigError("topology set is empty or sized for a different DG count")
        if not 0 <= initial_topology < len(self.topologies):
            raise ConfigError(f"initial topology {initial_topology} out of range")
        self.set_schedule(schedule)
        self.config = config
        self.detector = detector
        self.initial_topology = initial_topology
        self.steps_per_comm = int(round(config.comm_period / grid.dt))
        self.comm_per_epoch = int(round(config.epoch / config.comm_period))
        self.log_every = int(round(config.sample_period / grid.dt))
        if self.steps_per_comm < 1 or self.comm_per_epoch < 1 or self.log_every < 1:
            raise ConfigError("epoch, comm_period and sample_period must be multiples of dt")
        if self.steps_per_comm % self.log_every:
            raise ConfigError("sample_period must divide comm_period")
        if reference is None:
            reference = settle(grid, self.topologies[initial_topology].S, config.settle_time,
                               config.comm_period)
        self.reference = np.asarray(reference, dtype=float)
        self._nominals()
        self.state = self.initial_state()
        self.history: list = []
        self.events: list = []

    def _nominals(self):
        g = self.grid
        ref = self.reference
        share = g.m_P * ref[:, P_F]
        react = g.n_Q * ref[:, Q_F]
        if np.any(share <= 0):
            raise ConfigError("reference operating point has non-positive power sharing")
        # consensus-bus channels: (omega, m_P*P, n_Q*Q)
        self.comm_nominal = np.array([g.omega_n, np.mean(share),
                                      max(float(np.mean(np.abs(react))), 1e-9)])
        frac = self.config.stealth_fraction
        self.bounds = np.column_stack([-frac * self.comm_nominal, frac * self.comm_nominal])
        # monitored channels per DG: (omega, v_od, m_P*P)
        if self.config.p_n is not None:
            p_n = np.tile(np.asarray(self.config.p_n, dtype=float), (g.n, 1))
        else:
            p_n = np.column_stack([np.full(g.n, g.omega_n), ref[:, V_OD], share])
        self.p_n = p_n[:, :self.config.n_P]
        self.v_odn = np.array([p.v_odn for p in g.params])

    def set_schedule(self, schedule: AttackSchedule):
        for st in schedule.stages:
            if any(not 0 <= k < self.grid.n for k in st.dgs):
                raise ConfigError(f"attack stage refers to a DG outside 1..{self.grid.n}")
        self.schedule = schedule

    def offsets_from_fractions(self, fractions):
        """Absolute per-channel offsets from fractions of the channel nominals."""
        return tuple(float(f) * float(c) for f, c in zip(fractions, self.comm_nominal))

    @property
    def n_actions(self) -> int:
        return len(self.topologies)

    def initial_state(self) -> GameState:
        n = self.grid.n
        return GameState(step=0, topology=self.initial_topology,
                         attack=AttackState.initial(n, self.bounds),
                         flags=np.zeros(n, dtype=np.int8), flag_age=np.zeros(n, dtype=np.int64),
                         X=self.reference.copy())

    def reset(self) -> GameState:
        self.state = self.initial_state()
        self.history = []
        self.events = []
        return self.state

    # -- transition -------------------------------------------------------

    def transition(self, state: GameState, action: int):
        """Pure Markov transition; returns a :class:`StepResult`."""
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.n_actions):
            raise ConfigError(f"invalid topology id {action!r}")
        action = int(action)
        cfg = self.config
        grid = self.grid
        n = grid.n
        t0 = state.step * cfg.epoch
        events = []
        topo = self.topologies[action]
        S = topo.S
        if action != state.topology:
            events.append({"type": "switch", "t": t0, "from": state.topology, "to": action})

        attack = state.attack
        next_stage = state.next_stage
        neutral_since = state.neutral_since
        newly = 0
        stages = self.schedule.stages
        while next_stage < len(stages):
            st = stages[next_stage]
            if st.trigger == "time":
                ready = t0 >= st.time - 1e-9
            else:
                ready = neutral_since is not None and t0 - neutral_since >= self.schedule.hold - 1e-9
            if not ready:
                break
            before = int(attack.activated.sum())
            attack = activate_stage(attack, st, S)
            added = int(attack.activated.sum()) - before
            newly += added
            events.append({"type": "activate", "t": t0, "stage": next_stage,
                           "dgs": [k + 1 for k in st.dgs if attack.Theta[k]]})
            next_stage += 1
            neutral_since = None

        X = state.X
        dropped = np.zeros((n, n), dtype=bool)
        disagreement = np.zeros(n)
        logs = []
        t = t0
        try:
            for _ in range(self.comm_per_epoch):
                sv = grid.shared_values(X)
                recv = inject(sv, attack)
                link = S.copy()
                if self.detector is not None:
                    dropped |= self.detector(recv, self.comm_nominal)
                    link[dropped] = 0.0
                dev = np.abs(recv - sv[None, :, :]) / self.comm_nominal
                dev = np.where((S != 0)[:, :, None], dev, 0.0).max(axis=2).max(axis=0)
                disagreement = np.maximum(disagreement, dev)
                X, lg = grid.advance(X, self.steps_per_comm, recv, link, t0=t,
                                     log_every=self.log_every)
                logs.append(lg)
                t = t0 + (len(logs) * self.steps_per_comm) * grid.dt
        except SimulationDiverged as exc:
            raise SimulationDiverged(exc.t, f"diverged during epoch {state.step} on topology "
                                     f"{action} with Theta={attack.Theta.tolist()}") from exc
        samples = np.concatenate(logs)

        breakdown = self._score(samples, X, topo, attack, cfg.sigma_unit * newly)

        flags = np.where(disagreement > cfg.anomaly_threshold, 1, state.flags).astype(np.int8)
        flag_age = np.where(flags != 0, state.flag_age + 1, 0).astype(np.int64)
        t1 = (state.step + 1) * cfg.epoch
        if cfg.auto_scan:
            for k in range(n):
                if flag_age[k] >= cfg.scan_after:
                    was = bool(attack.Theta[k])
                    attack = remove_malware(attack, k)
                    flags[k] = 0
                    flag_age[k] = 0
                    events.append({"type": "scan", "t": t1, "dg": k + 1, "compromised": was})
        if 0 < next_stage < len(stages) and stages[next_stage].trigger == "neutralized":
            if is_neutralized(attack, stages[next_stage - 1].dgs, S):
                neutral_since = t1 if neutral_since is None else neutral_since
            else:
                neutral_since = None

        nxt = GameState(step=state.step + 1, topology=action, attack=attack, flags=flags,
                        flag_age=flag_age, X=X, next_stage=next_stage,
                        neutral_since=neutral_since,
                        cum_U_D=state.cum_U_D + breakdown.U_D,
                        cum_U_R=state.cum_U_R + breakdown.U_R)
        nxt.attack.check()
        return StepResult(nxt, breakdown.U_D, breakdown, samples, events)

    def _score(self, samples, X, topo, attack, sigma) -> UtilityBreakdown:
        grid = self.grid
        n_P = self.config.n_P
        P = samples[:, :, 1 + P_F]
        omega = grid.omega_n - grid.m_P * P + samples[:, :, 1 + D_OMEGA]
        chans = (omega, samples[:, :, 1 + V_OD], grid.m_P * P)[:n_P]
        z = np.zeros((grid.n, n_P), dtype=np.int64)
        p_a = np.zeros((grid.n, n_P))
        p_c = np.zeros((grid.n, n_P))
        for h, series in enumerate(chans):
            for k in range(grid.n):
                z[k, h], p_a[k, h] = count_oscillations(
                    series[:, k], floor=self.config.osc_floor * self.p_n[k, h])
            p_c[:, h] = series.mean(axis=0)
        ref = self.reference
        sum_delta = float(np.sum(np.abs(X[:, D_OMEGA] - ref[:, D_OMEGA]) / grid.omega_n
                                 + np.abs(X[:, D_V] - ref[:, D_V]) / self.v_odn))
        N_l, N_c, C_c = link_counts(topo, attack.Theta)
        return UtilityBreakdown.compute(sum_delta, z, p_a, self.p_n, p_c, N_l, N_c, C_c,
                                        sigma, self.config.rho)

    def step(self, action: int) -> StepResult:
        res = self.transition(self.state, action)
        self.state = res.state
        self.events.extend(res.events)
        self.history.append({"step": res.state.step - 1, "topology": int(action),
                             **res.breakdown.to_dict()})
        return res

    # -- persistence ------------------------------------------------------

    def snapshot(self) -> str:
        return json.dumps({"state": self.state.to_dict(), "reference": self.reference.tolist(),
                           "history": self.history, "events": self.events})

    def restore(self, blob: str):
        d = json.loads(blob)
        ref = np.array(d["reference"], dtype=float)
        if ref.shape != self.reference.shape:
            raise ConfigError("snapshot is for a different microgrid")
        self.reference = ref
        self._nominals()
        self.state = GameState.from_dict(d["state"])
        self.history = d["history"]
        self.events = d["events"]

    def metrics(self) -> dict:
        return {
            "cumulative_U_D": self.state.cum_U_D,
            "cumulative_U_R": self.state.cum_U_R,
            "epochs": self.history,
            "scan_events": [e for e in self.events if e["type"] == "scan"],
            "topology_switches": [e for e in self.events if e["type"] == "switch"],
            "activations": [e for e in self.events if e["type"] == "activate"],
        }


def env_step(game: MicrogridGame, state: GameState, action: int) -> tuple:
    """Functional form: ``(next_state, U_D, breakdown)`` without touching ``game.state``."""
    res = game.transition(state, action)
    return res.state, res.U_D, res.breakdown
