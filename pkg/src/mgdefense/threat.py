"""Latent multi-stage rootkit attacker.

A compromised DG transmits its consensus tuple ``(omega, m_P*P, n_Q*Q)``
with a fixed offset added, but only on the links it had on the defender's
topology at the moment it was activated (``Xi``). Offsets must stay strictly
inside the stealth interval; anything else is clamped and logged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import ConfigError

log = logging.getLogger(__name__)

CHANNELS = ("omega", "power", "reactive")
N_CHANNELS = len(CHANNELS)


@dataclass(frozen=True)
class AttackState:
    """Attacker ground truth.

    ``Xi[k, l] = 1`` means the packet DG ``k`` sends to DG ``l`` is tampered
    with; ``x_a[k]`` is the per-channel offset DG ``k`` applies on all of
    those links. ``bounds`` is a ``(3, 2)`` array of ``(x_amin, x_amax)``.
    """

    Theta: np.ndarray
    Xi: np.ndarray
    burned: np.ndarray
    activated: np.ndarray
    x_a: np.ndarray
    bounds: np.ndarray

    @classmethod
    def initial(cls, n, bounds):
        bounds = np.asarray(bounds, dtype=float)
        if bounds.shape != (N_CHANNELS, 2) or np.any(bounds[:, 0] >= bounds[:, 1]):
            raise ConfigError("bounds must be a (3, 2) array with x_amin < x_amax")
        if np.any(bounds[:, 0] >= 0) or np.any(bounds[:, 1] <= 0):
            raise ConfigError("stealth interval must contain zero")
        return cls(Theta=np.zeros(n, dtype=np.int8), Xi=np.zeros((n, n), dtype=np.int8),
                   burned=np.zeros(n, dtype=np.int8), activated=np.zeros(n, dtype=np.int8),
                   x_a=np.zeros((n, N_CHANNELS)), bounds=bounds)

    @property
    def n(self) -> int:
        return self.Theta.shape[0]

    def check(self):
        rows = self.Xi.any(axis=1)
        assert not np.any(rows & (self.Theta == 0)), "Xi row set for a clean DG"
        assert not np.any((self.burned == 1) & (self.Theta == 1)), "burned DG still active"

    def to_dict(self) -> dict:
        return {"Theta": self.Theta.tolist(), "Xi": self.Xi.tolist(),
                "burned": self.burned.tolist(), "activated": self.activated.tolist(),
                "x_a": self.x_a.tolist(), "bounds": self.bounds.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(Theta=np.array(d["Theta"], dtype=np.int8), Xi=np.array(d["Xi"], dtype=np.int8),
                   burned=np.array(d["burned"], dtype=np.int8),
                   activated=np.array(d["activated"], dtype=np.int8),
                   x_a=np.array(d["x_a"], dtype=float), bounds=np.array(d["bounds"], dtype=float))


@dataclass(frozen=True)
class AttackStage:
    """DGs to activate and their per-channel offsets.

    ``trigger`` is ``"time"`` (activate at ``time``) or ``"neutralized"``
    (activate once every DG of the previous stage has been burned or cut off
    for ``hold`` seconds).
    """

    dgs: tuple
    offsets: tuple
    time: float = 0.0
    trigger: str = "time"

    def __post_init__(self):
        if self.trigger not in ("time", "neutralized"):
            raise ConfigError(f"unknown stage trigger {self.trigger!r}")
        if len(self.offsets) != N_CHANNELS:
            raise ConfigError("stage offsets need one value per channel")
        if not self.dgs:
            raise ConfigError("stage has no DGs")


@dataclass(frozen=True)
class AttackSchedule:
    stages: tuple = ()
    hold: float = 0.5

    def __post_init__(self):
        last = -np.inf
        for st in self.stages:
            if st.trigger == "time":
                if st.time < last:
                    raise ConfigError("timed stages must have nondecreasing activation times")
                last = st.time
        seen = set()
        for st in self.stages:
            if seen & set(st.dgs):
                raise ConfigError(f"DG listed in more than one stage: {sorted(seen & set(st.dgs))}")
            seen |= set(st.dgs)
        if not self.hold > 0:
            raise ConfigError("neutralization hold time must be positive")


def is_stealthy(x_a, bounds) -> bool:
    """True iff every channel offset lies strictly inside ``(x_amin, x_amax)``."""
    x = np.atleast_2d(np.asarray(x_a, dtype=float))
    b = np.asarray(bounds, dtype=float)
    return bool(np.all((x > b[:, 0]) & (x < b[:, 1])))


def clamp_to_bounds(x_a, bounds):
    """Pull offsets into the open stealth interval; returns ``(x, clamped)``."""
    x = np.array(x_a, dtype=float)
    b = np.asarray(bounds, dtype=float)
    lo = np.nextafter(b[:, 0], np.inf)
    hi = np.nextafter(b[:, 1], -np.inf)
    y = np.minimum(np.maximum(x, lo), hi)
    y = np.where(np.isnan(x), 0.0, y)
    return y, bool(np.any(y != x) or np.any(np.isnan(x)))


def activate_stage(state: AttackState, stage: AttackStage, S) -> AttackState:
    """Switch on the stage's DGs, tampering with their links on topology ``S``.

    Burned or previously activated DGs are skipped.
    """
    S = np.asarray(S)
    Theta = state.Theta.copy()
    Xi = state.Xi.copy()
    activated = state.activated.copy()
    x_a = state.x_a.copy()
    offsets, clamped = clamp_to_bounds(stage.offsets, state.bounds)
    if clamped:
        log.warning("stage offsets %s outside the stealth interval; clamped to %s",
                    list(stage.offsets), offsets.tolist())
    for k in stage.dgs:
        if not 0 <= k < state.n:
            raise ConfigError(f"stage refers to DG index {k} outside 0..{state.n - 1}")
        if state.burned[k]:
            log.info("DG%d already burned; stage entry skipped", k + 1)
            continue
        if activated[k]:
            log.info("DG%d was already activated once; stage entry skipped", k + 1)
            continue
        Theta[k] = 1
        activated[k] = 1
        Xi[k] = (S[k] != 0).astype(np.int8)
        Xi[k, k] = 0
        x_a[k] = offsets
    return replace(state, Theta=Theta, Xi=Xi, activated=activated, x_a=x_a)


def inject(x_n, state: AttackState):
    """Packets as received: ``out[l, k]`` is what DG ``l`` gets from DG ``k``.

    ``x_n`` holds the true ``(N, 3)`` shared tuples. Untampered links carry
    the true values bit for bit.
    """
    x_n = np.asarray(x_n, dtype=float)
    n = x_n.shape[0]
    out = np.array(np.broadcast_to(x_n[None, :, :], (n, n, N_CHANNELS)))
    if not state.Theta.any():
        return out
    x_a, clamped = clamp_to_bounds(state.x_a, state.bounds)
    if clamped:
        log.warning("attacker offsets outside the stealth interval; clamped")
    tampered = (state.Xi.T != 0)  # [receiver, sender]
    recv_idx, send_idx = np.nonzero(tampered)
    out[recv_idx, send_idx] = x_n[send_idx] + x_a[send_idx]
    return out


def remove_malware(state: AttackState, dg: int) -> AttackState:
    """Scan and clean ``dg``: it stops injecting and can never be reused."""
    Theta = state.Theta.copy()
    Xi = state.Xi.copy()
    burned = state.burned.copy()
    x_a = state.x_a.copy()
    Theta[dg] = 0
    burned[dg] = 1
    Xi[dg, :] = 0
    Xi[:, dg] = 0
    x_a[dg] = 0.0
    return replace(state, Theta=Theta, Xi=Xi, burned=burned, x_a=x_a)


def effective_links(state: AttackState, S) -> np.ndarray:
    """Tampered links that are also in use on topology ``S`` (``Xi`` and ``S``)."""
    return (state.Xi != 0) & (np.asarray(S) != 0)


def is_neutralized(state: AttackState, dgs, S) -> bool:
    """True when none of ``dgs`` can currently influence the consensus."""
    eff = effective_links(state, S)
    return all(state.burned[k] or not eff[k].any() for k in dgs)
