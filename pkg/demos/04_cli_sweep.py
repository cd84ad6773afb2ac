"""Drive the command-line front end: train, eval, and a mode sweep.

Writes a tiny config, trains two seeds, re-evaluates the checkpoint, then
runs a two-variant mode sweep, printing the artifact tree it leaves behind.
Everything is desk-scale; the whole script runs in about a minute.
"""

import pathlib
import tempfile

from contextrl import cli

CONFIG = """
seeds: [0, 1]
mode: pearl
epochs: 2
sac_iters_per_epoch: 40
k_trajs: 2
batch_episodes: 4
tr: 5
n_context: 16
test_episodes: 2
hidden: [16]
recurrent_hidden: 8
gamma: 0.95
tau: 0.01
lr_encoder: 0.001
lr_actor: 0.001
lr_critic: 0.001
env:
  family: velocity
  horizon: 30
  n_train_tasks: 2
  n_test_tasks: 2
  min_goal: -1.0
  max_goal: 1.0
  goal_choices: [-1.0, 1.0]
  n_subtasks_min: 1
  n_subtasks_max: 1
"""

root = pathlib.Path(tempfile.mkdtemp(prefix="contextrl_demo_"))
cfg_path = root / "config.yaml"
cfg_path.write_text(CONFIG)

print("== train two seeds ==")
rc = cli.main(["train", "--config", str(cfg_path), "--output-dir", str(root / "train")])
assert rc == 0

print("\n== eval from the checkpoint ==")
rc = cli.main(["eval", "--checkpoint", str(root / "train" / "seed0" / "checkpoint.npz"),
               "--episodes", "3"])
assert rc == 0

print("\n== sweep over modes ==")
rc = cli.main(["sweep", "--config", str(cfg_path), "--axis", "mode",
               "--values", "pearl,ocean", "--seed", "0",
               "--output-dir", str(root / "sweep")])
assert rc == 0

print("\n== artifacts ==")
for path in sorted(root.rglob("*")):
    if path.is_file():
        print(" ", path.relative_to(root))
print(f"\n(left in {root})")
