"""
Encoder architecture x residual x sharing
=========================================

Every cell of the grid retrains from the same template start. The CSV written
by the grid runner is the interface; here the rows are just printed as a table.
"""

import tempfile
import warnings
from pathlib import Path

from prelab.config import AblationGrid, ExperimentConfig
from prelab.experiment import run_ablation_grid
from prelab.synthetic import SyntheticTaskSpec, generate_synthetic_task, write_task
from prelab.train import TrainConfig, mean_of_h

warnings.simplefilter("ignore")

work = Path(tempfile.mkdtemp())
write_task(generate_synthetic_task(SyntheticTaskSpec(C=10, d=32, K=16)), work / "data")
base = ExperimentConfig(data_dir="data", train=TrainConfig(), base_dir=work)

grid = AblationGrid(architectures=["bilstm", "mlp", "transformer"], residual=[True, False],
                    sharing=["shared", "separate"], seeds=[1])
rows = run_ablation_grid(grid, base, work / "ablation.csv")

print(f"{'arch':12s} {'residual':8s} {'sharing':9s} {'base':>6s} {'new':>6s} {'H':>6s} {'loss':>7s}")
for r in rows:
    print(f"{r['arch']:12s} {r['residual']:8s} {r['sharing']:9s} {float(r['base_acc']):6.1f} "
          f"{float(r['new_acc']):6.1f} {float(r['h_mean']):6.1f} {float(r['final_loss']):7.4f}")

# %%
# Mean of per-run H, per architecture (not the H of mean accuracies).


class _H:
    def __init__(self, h):
        self.h_mean = h


for arch in grid.architectures:
    hs = [_H(float(r["h_mean"])) for r in rows if r["arch"] == arch]
    print(f"{arch}: mean H over {len(hs)} cells = {mean_of_h(hs):.2f}")
print("csv:", work / "ablation.csv")
