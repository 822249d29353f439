"""
Overfitting a handful of tiles
==============================

The tiny model should be able to memorise eight synthetic tiles in a few
hundred steps.  This is the quickest end-to-end check that the loss, the
gradients and the optimiser cooperate.  Expect well under a minute on one
CPU core.
"""

###########################################################################
# Data: eight tiles, all in the training split.

import tempfile

from mtbit.data_core import SynthSpec, generate_synthetic
from mtbit.metrics import evaluate_split
from mtbit.model import param_count, tiny_config
from mtbit.training import TrainConfig, train_loop

root = tempfile.mkdtemp(prefix="mtbit_desk_")
manifest = generate_synthetic(SynthSpec(seed=0, n_tiles=8, split_fractions=(1.0, 0.0, 0.0)), root + "/data")

###########################################################################
# The tiny config keeps features at full 16x16 resolution, so nothing is lost
# to upsampling and the model can in principle reproduce every building edge.

cfg = tiny_config()
tc = TrainConfig.desk(seed=0)
print(f"{param_count(cfg)} parameters; lr={tc.lr} batch={tc.batch_size} epochs={tc.epochs}")


def show(event, ck, info):
    if event == "epoch" and info["epoch"] % 100 == 0:
        print(f"epoch {info['epoch']:3d}  loss {info['total']:.4f}")


ck, rows = train_loop(manifest, cfg, tc, callbacks=[show], out_dir=root + "/run")

###########################################################################
# Training-set metrics after the run.

rep = evaluate_split(ck, manifest, "train")
print(rep.summary())
print("checkpoint and metrics.csv in", root + "/run")
