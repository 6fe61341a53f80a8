"""Train a small DQN defender from scratch and put it against the staggered attack.

Training uses 20 short episodes instead of the 100 behind the bundled
checkpoint, so it finishes in well under a minute. The Bellman residual
on the final replay memory shows how far the network moved from its
initial weights. The weaker agent is then run on the four-stage attack.

    python demos/pretrain_small.py
"""
import dataclasses
import tempfile
from pathlib import Path

from mgdefense.cli import pretrain, run_scenario
from mgdefense.config import load_scenario, shipped_scenario


def main():
    spec = load_scenario(shipped_scenario("subcase_1"))
    spec = dataclasses.replace(spec, pretrain={"episodes": 20, "episode_duration": 2.0,
                                               "updates_per_step": 4})
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "small.json"
        _, rep = pretrain(spec, ckpt, Path(tmp) / "training_log.csv")
        print(f"train steps {rep['train_steps']}, Bellman residual "
              f"{rep['residual_start']:.4f} -> {rep['residual_end']:.4f}")

        summary, _ = run_scenario(dataclasses.replace(spec, checkpoint=str(ckpt)))
    print(f"cum U_D {summary.cum_U_D:+.3f}, sustained frequency error "
          f"{summary.sustained_freq_dev:.2e} rad/s, objectives met: {summary.objectives_met}")
    for ev in summary.scan_events:
        print(f"  t={ev['t']:.1f} s  DG{ev['dg']} cleaned")


if __name__ == "__main__":
    main()
