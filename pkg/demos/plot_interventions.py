"""
Freezing one network and watching the other
============================================

Any checkpoint can be resumed with an intervention: scaled learning rates,
reset Adam moments, a new hinge margin or D step count, or one network frozen
outright.  A frozen network keeps its parameters bit for bit.  Here a short
run is trained, then continued twice from its last checkpoint, once with G
frozen and once with D frozen.
"""

import tempfile
from pathlib import Path

import numpy as np

from gslab.checkpoint import load_checkpoint
from gslab.config import loads
from gslab.run import resume_run, train_run
from gslab.telemetry import read_losses
from gslab.training import InterventionSpec

cfg = loads("""
n_modes=8
z_dim=16
g_chunk_size=4
g_hidden_widths=32,32,32
d_hidden_widths=32,32
batch=128
total_steps=400
checkpoint_every=400
standing_passes=10
""")


def block_means(path, start, attr, block=100):
    vals = np.array([getattr(r, attr) for r in read_losses(path) if r.step >= start])
    return np.round([vals[i:i + block].mean() for i in range(0, len(vals), block)], 4)


with tempfile.TemporaryDirectory() as tmp:
    base = train_run(cfg, Path(tmp) / "base")
    ck = base / "checkpoints" / "step_0000400.gsl"
    before = load_checkpoint(ck)

    for freeze in ("g", "d"):
        out = resume_run(ck, Path(tmp) / f"freeze_{freeze}", steps=400, spec=InterventionSpec(freeze=freeze))
        after = load_checkpoint(out / "checkpoints" / "final.gsl")
        same_g = all(np.array_equal(p.data, after.G.params[k].data) for k, p in before.G.params.items())
        same_d = all(np.array_equal(p.data, after.D.params[k].data) for k, p in before.D.params.items())
        print(f"freeze {freeze}: G unchanged {same_g}, D unchanged {same_d}")
        for attr in ("d_loss_real", "d_loss_fake", "g_loss"):
            print(f"  {attr:12s} 100-step means {block_means(out / 'losses.csv', 400, attr)}")
