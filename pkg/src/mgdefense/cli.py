"""Command-line scenario runner.

Subcommands: ``run``, ``pretrain``, ``compare``, ``enumerate-topologies`` and
``oracle``. Log verbosity comes from ``MGDEFENSE_LOG`` (``DEBUG``, ``INFO``,
``WARNING``...). Exit codes: 0 success, 2 configuration error, 3 divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .config import ScenarioSpec, load_scenario, shipped_scenario
from .consensus import enumerate_topologies, topologies_to_json
from .defense import (DqnDefender, StaticDefender, SurrogateGame, bellman_residual,
                      make_static_detector, oracle_agreement, train_on_surrogate,
                      value_iteration)
from .dynamics import (D_OMEGA, D_V, P_F, Q_F, V_OD, V_OQ, ConfigError,
                       SimulationDiverged)
from .game import MicrogridGame
from .threat import AttackSchedule, AttackStage, remove_malware

log = logging.getLogger("mgdefense")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
LOG_ENV = "MGDEFENSE_LOG"
CSV_HEADER = "t,dg,omega,v_od,v_oq,P,Q,delta_omega,delta_v,f_hz"
FINAL_WINDOW = 1.0
SUSTAIN_WINDOW = 2.0


@dataclass
class RunSummary:
    """Headline results of one scenario run. Mismatches are fractions of the mean share."""

    scenario: str
    defender: str
    seed: int
    duration: float
    cum_U_D: float
    cum_U_R: float
    max_freq_dev: float
    max_mismatch: float
    final_freq_dev: float
    final_mismatch: float
    sustained_freq_dev: float
    sustained_mismatch: float
    objectives_met: bool
    activations: list = field(default_factory=list)
    scan_events: list = field(default_factory=list)
    topology_switches: list = field(default_factory=list)
    burn_delays: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def __post_init__(self):
        if self.cum_U_D + self.cum_U_R != 0.0 and abs(self.cum_U_D + self.cum_U_R) > 1e-9 * max(
                1.0, abs(self.cum_U_D)):
            raise AssertionError("run summary violates the zero-sum identity")

    def to_dict(self, include_wall=False) -> dict:
        d = dataclasses.asdict(self)
        if not include_wall:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d) -> "RunSummary":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _fmt(x) -> str:
    return repr(float(x))


def build_game(spec: ScenarioSpec, defender: str):
    grid, topologies = spec.system.build()
    game_cfg = dataclasses.replace(spec.game, auto_scan=(defender == "dqn"))
    detector = make_static_detector(spec.detector) if defender == "static" else None
    game = MicrogridGame(grid, topologies, AttackSchedule(), game_cfg, detector=detector,
                         initial_topology=spec.initial_topology)
    game.set_schedule(spec.absolute_schedule(game.comm_nominal))
    return game


def make_defender(spec: ScenarioSpec, game: MicrogridGame, defender: str, checkpoint=None,
                  seed=None):
    seed = spec.seed if seed is None else seed
    if defender == "static":
        return StaticDefender(spec.initial_topology)
    path = checkpoint or spec.checkpoint
    if path:
        try:
            return DqnDefender.from_checkpoint(path, game.n_actions, game.grid.n, spec.agent,
                                               seed=seed)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    log.warning("no checkpoint given; the DQN defender starts untrained")
    return DqnDefender(game.n_actions, game.grid.n, spec.agent, seed=seed)


def _trajectory(game, samples):
    grid = game.grid
    P = samples[:, :, 1 + P_F]
    omega = grid.omega_n - grid.m_P * P + samples[:, :, 1 + D_OMEGA]
    share = grid.m_P * P
    return samples[:, 0, 0], omega, share


def _mismatch(share):
    return (share.max(axis=1) - share.min(axis=1)) / np.abs(share.mean(axis=1))


def run_episode(game: MicrogridGame, agent, n_epochs, record_every=10, on_step=None):
    """Play one episode; returns ``(samples, csv_rows)``."""
    grid = game.grid
    state = game.state
    chunks = []
    rows = []
    for e in range(n_epochs):
        a = agent.act(state)
        res = game.step(a)
        terminal = e == n_epochs - 1
        agent.observe(state, a, res.U_D, res.state, terminal)
        state = res.state
        chunks.append(res.samples)
        if record_every:
            for s in res.samples[record_every - 1::record_every]:
                P = s[:, 1 + P_F]
                omega = grid.omega_n - grid.m_P * P + s[:, 1 + D_OMEGA]
                for k in range(grid.n):
                    rows.append(",".join([
                        _fmt(s[0, 0]), str(k + 1), _fmt(omega[k]), _fmt(s[k, 1 + V_OD]),
                        _fmt(s[k, 1 + V_OQ]), _fmt(P[k]), _fmt(s[k, 1 + Q_F]),
                        _fmt(s[k, 1 + D_OMEGA]), _fmt(s[k, 1 + D_V]),
                        _fmt(omega[k] / (2 * np.pi))]))
        if on_step:
            on_step(e, res)
    return np.concatenate(chunks), rows


def summarize(spec, game, samples, defender, wall=0.0) -> RunSummary:
    t, omega, share = _trajectory(game, samples)
    dev = np.abs(omega - game.grid.omega_n).max(axis=1)
    mism = _mismatch(share)
    t_end = t[-1]
    fin = t > t_end - FINAL_WINDOW
    sus = t > t_end - SUSTAIN_WINDOW
    m = game.metrics()
    act = {}
    for ev in m["activations"]:
        for k in ev["dgs"]:
            act[k] = ev["t"]
    delays = {}
    for ev in m["scan_events"]:
        if ev["dg"] in act and ev["compromised"]:
            delays[str(ev["dg"])] = ev["t"] - act[ev["dg"]]
    final_dev = float(dev[fin].max())
    final_mm = float(mism[fin].max())
    return RunSummary(
        scenario=spec.name, defender=defender, seed=spec.seed, duration=spec.duration,
        cum_U_D=m["cumulative_U_D"], cum_U_R=m["cumulative_U_R"],
        max_freq_dev=float(dev.max()), max_mismatch=float(mism.max()),
        final_freq_dev=final_dev, final_mismatch=final_mm,
        sustained_freq_dev=float(dev[sus].mean()), sustained_mismatch=float(mism[sus].mean()),
        objectives_met=bool(final_dev < 1e-3 and final_mm < 0.01),
        activations=m["activations"], scan_events=m["scan_events"],
        topology_switches=m["topology_switches"], burn_delays=delays, wall_time=wall)


def run_scenario(spec: ScenarioSpec, defender=None, checkpoint=None, out=None, agent=None):
    """Run a scenario end to end. Returns ``(RunSummary, game)``.

    With ``out`` set, writes ``trajectory.csv``, ``metrics.json``,
    ``events.log`` and ``summary.json`` there.
    """
    defender = defender or spec.defender
    t_wall = time.perf_counter()
    game = build_game(spec, defender)
    agent = agent or make_defender(spec, game, defender, checkpoint)
    n_epochs = int(round(spec.duration / game.config.epoch))
    samples, rows = run_episode(game, agent, n_epochs, record_every=10 if out else 0)
    summary = summarize(spec, game, samples, defender, time.perf_counter() - t_wall)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "trajectory.csv"), "w") as fh:
            fh.write(CSV_HEADER + "\n")
            fh.write("\n".join(rows) + "\n")
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(game.metrics(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "events.log"), "w") as fh:
            for ev in game.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        with open(os.path.join(out, "summary.json"), "w") as fh:
            json.dump(summary.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    return summary, game


_COMPARE_FIELDS = ("cum_U_D", "cum_U_R", "max_freq_dev", "max_mismatch", "final_freq_dev",
                   "final_mismatch", "sustained_freq_dev", "sustained_mismatch")


def compare(a: RunSummary, b: RunSummary) -> dict:
    """Side-by-side report; ``delta`` is ``b - a``."""
    rows = {}
    for f in _COMPARE_FIELDS:
        va, vb = getattr(a, f), getattr(b, f)
        rows[f] = {"a": va, "b": vb, "delta": vb - va}
    for f in ("scan_events", "topology_switches", "activations"):
        na, nb = len(getattr(a, f)), len(getattr(b, f))
        rows[f"n_{f}"] = {"a": na, "b": nb, "delta": nb - na}
    return {"a": {"scenario": a.scenario, "defender": a.defender,
                  "objectives_met": a.objectives_met},
            "b": {"scenario": b.scenario, "defender": b.defender,
                  "objectives_met": b.objectives_met},
            "rows": rows}


def format_comparison(report) -> str:
    a, b = report["a"], report["b"]
    head = f"{'quantity':<22}{a['defender'] + ':' + a['scenario']:>24}{b['defender'] + ':' + b['scenario']:>24}{'delta':>14}"
    lines = [head, "-" * len(head)]
    for name, r in report["rows"].items():
        lines.append(f"{name:<22}{r['a']:>24.6g}{r['b']:>24.6g}{r['delta']:>14.4g}")
    lines.append(f"{'objectives_met':<22}{str(a['objectives_met']):>24}{str(b['objectives_met']):>24}")
    return "\n".join(lines)


# -- pretraining ---------------------------------------------------------------


PRETRAIN_DEFAULTS = {"episodes": 30, "episode_duration": 4.0, "benign_fraction": 0.2,
                     "attack_window": [0.5, 1.5], "max_fractions": [0.001, 0.049, 0.049],
                     "updates_per_step": 1, "preburned": True}


def pretrain(spec: ScenarioSpec, checkpoint_path, log_path=None, seed=None):
    """Offline training on simulated benign and single-DG injection episodes.

    Returns ``(agent, report)``; the report compares the Bellman residual
    of the initial and trained networks on the final replay memory.
    Training is a pure function of the scenario and seed, so the written
    checkpoint is byte-reproducible.
    """
    opts = {**PRETRAIN_DEFAULTS, **(spec.pretrain or {})}
    unknown = set(opts) - set(PRETRAIN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown pretrain option(s): {sorted(unknown)}")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0xD9])
    game = build_game(dataclasses.replace(spec, schedule=AttackSchedule()), "dqn")
    agent = DqnDefender(game.n_actions, game.grid.n, spec.agent, seed=seed)
    initial = nn.clone(agent.weights)
    n_epochs = int(round(float(opts["episode_duration"]) / game.config.epoch))
    lo, hi = (float(x) for x in opts["attack_window"])
    maxf = np.asarray(opts["max_fractions"], dtype=float)
    log_rows = ["step,episode,loss,B_t,cum_reward"]
    n = game.grid.n
    for ep in range(int(opts["episodes"])):
        # Earlier clean-ups leave some DGs burned; covers states reached in multi-stage attacks.
        n_burned = int(rng.integers(n)) if opts["preburned"] else 0
        burned = [int(b) for b in rng.permutation(n)[:n_burned]]
        if rng.uniform() < float(opts["benign_fraction"]):
            sched = AttackSchedule()
        else:
            clean = [d for d in range(n) if d not in burned]
            k = clean[int(rng.integers(len(clean)))]
            fr = rng.uniform(-1.0, 1.0, size=3) * maxf
            t_a = round(float(rng.uniform(lo, hi)), 1)
            sched = AttackSchedule((AttackStage((k,), game.offsets_from_fractions(fr), time=t_a),))
        game.set_schedule(sched)
        game.reset()
        attack = game.state.attack
        for d in burned:
            attack = remove_malware(attack, d)
        game.state = dataclasses.replace(game.state, attack=attack,
                                         topology=int(rng.integers(game.n_actions)))

        def on_step(e, res, ep=ep):
            for _ in range(int(opts["updates_per_step"]) - 1):
                agent.learn()
            loss = agent.losses[-1] if agent.losses else float("nan")
            log_rows.append(f"{agent.t},{ep},{_fmt(loss)},{_fmt(agent.B_t)},"
                            f"{_fmt(res.state.cum_U_D)}")

        run_episode(game, agent, n_epochs, record_every=0, on_step=on_step)
        log.info("pretrain episode %d: cum U_D %.4f, B_t %.4f", ep, game.state.cum_U_D, agent.B_t)
    agent.save(checkpoint_path, {"seed": seed, "episodes": int(opts["episodes"])})
    if log_path:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_rows) + "\n")
    memory = agent.memory.contents()
    gamma = spec.agent.gamma
    report = {"checkpoint": str(checkpoint_path), "train_steps": agent.train_steps,
              "episodes": int(opts["episodes"]), "retrains": agent.retrains,
              "residual_start": bellman_residual(initial, memory, gamma),
              "residual_end": bellman_residual(agent.weights, memory, gamma)}
    return agent, report


def run_oracle(seed=0, episodes=200):
    """Tabular value-iteration check of the DQN on the reduced 3-DG game."""
    t0 = time.perf_counter()
    game = SurrogateGame(enumerate_topologies(3))
    Q = value_iteration(game)
    agent = train_on_surrogate(game, episodes=episodes, seed=seed)
    agree = oracle_agreement(game, agent, Q)
    return {"states": len(game.states), "agreement": agree, "episodes": episodes,
            "seed": seed, "wall_time": time.perf_counter() - t0}


# -- argument parsing ------------------------------------------------------------


def _resolve_scenario(name):
    if name is None:
        raise ConfigError("--scenario is required")
    if os.path.isfile(name):
        return load_scenario(name)
    return load_scenario(shipped_scenario(name))


def _apply_overrides(spec, args):
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "defender", None):
        kw["defender"] = args.defender
    return dataclasses.replace(spec, **kw) if kw else spec


def _cmd_run(args):
    spec = _apply_overrides(_resolve_scenario(args.scenario), args)
    summary, _ = run_scenario(spec, checkpoint=args.checkpoint, out=args.out)
    print(json.dumps(summary.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_pretrain(args):
    spec = _apply_overrides(_resolve_scenario(args.scenario), args)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(out, "checkpoint.json")
    _, report = pretrain(spec, ckpt, os.path.join(out, "training_log.csv"))
    print(json.dumps(report, indent=1))
    return EXIT_OK


def _cmd_compare(args):
    if args.summaries:
        if len(args.summaries) != 2:
            raise ConfigError("compare takes exactly two summary files")
        loaded = []
        for p in args.summaries:
            try:
                with open(p) as fh:
                    loaded.append(RunSummary.from_dict(json.load(fh)))
            except (OSError, ValueError, TypeError) as exc:
                raise ConfigError(f"cannot read summary {p}: {exc}") from exc
        a, b = loaded
    else:
        spec = _apply_overrides(_resolve_scenario(args.scenario), args)
        sub = (lambda d: os.path.join(args.out, d)) if args.out else (lambda d: None)
        a, _ = run_scenario(spec, defender="static", out=sub("static"))
        b, _ = run_scenario(spec, defender="dqn", checkpoint=args.checkpoint, out=sub("dqn"))
    report = compare(a, b)
    print(format_comparison(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "comparison.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _cmd_enumerate(args):
    topologies = enumerate_topologies(args.n)
    path = os.path.join(args.out, "topologies.json") if args.out else None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    print(topologies_to_json(topologies, path))
    return EXIT_OK


def _cmd_oracle(args):
    res = run_oracle(seed=args.seed or 0, episodes=args.episodes)
    print(json.dumps(res, indent=1))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "oracle.json"), "w") as fh:
            json.dump(res, fh, indent=1)
    return EXIT_OK if res["agreement"] >= 0.9 else 1


def build_parser():
    p = argparse.ArgumentParser(prog="mgdefense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", help="scenario YAML file or bundled scenario name")
        sp.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
        sp.add_argument("--out", help="output directory")

    r = sub.add_parser("run", help="run one scenario")
    common(r)
    r.add_argument("--defender", choices=("static", "dqn"))
    r.add_argument("--checkpoint", help="DQN weights to load")
    r.set_defaults(func=_cmd_run)

    t = sub.add_parser("pretrain", help="offline DQN training")
    common(t)
    t.add_argument("--checkpoint", help="where to write the trained weights")
    t.set_defaults(func=_cmd_pretrain)

    c = sub.add_parser("compare", help="static vs DQN defender (or two summary files)")
    common(c)
    c.add_argument("--checkpoint", help="DQN weights to load")
    c.add_argument("summaries", nargs="*", help="two summary.json files to compare instead")
    c.set_defaults(func=_cmd_compare)

    e = sub.add_parser("enumerate-topologies", help="list the spanning-tree action set")
    e.add_argument("--n", type=int, default=4, help="number of DGs")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=_cmd_enumerate)

    o = sub.add_parser("oracle", help="tabular value-iteration check of the DQN")
    common(o, scenario=False)
    o.add_argument("--episodes", type=int, default=200)
    o.set_defaults(func=_cmd_oracle)
    return p


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, nn.NonFiniteError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
