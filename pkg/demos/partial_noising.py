"""
Partial-noising correction at a glance
======================================

A denoiser trained only on clean images can still remove motion artifacts:
noise the corrupted image to an intermediate step n, where the ghosting is
buried under Gaussian noise but coarse anatomy survives, then run the
reverse chain back to step 0.

This script trains a small model for a few minutes on one core, so expect
a rough result. Pass a checkpoint trained with ``mocodiff train-ddpm`` (for
instance ``artifacts/desk/ddpm.mrck``) to use a proper model instead::

    python demos/partial_noising.py [checkpoint]
"""

import sys

import numpy as np

from mocodiff import dataio, metrics
from mocodiff.diffusion import build_schedule, correct, train_ddpm
from mocodiff.motionsim import phantom, random_trajectory, simulate_motion
from mocodiff.neural import build_unet

sched = build_schedule(500)
if len(sys.argv) > 1:
    model = dataio.load_checkpoint(sys.argv[1])
else:
    train = np.stack([phantom(np.random.default_rng(1000 + i), 32) for i in range(40)])[:, None]
    val = np.stack([phantom(np.random.default_rng(2000 + i), 32) for i in range(8)])[:, None]
    model = build_unet(channels=8, time_embed_dim=16, seed=0)
    hist = train_ddpm(model, train, sched, steps=400, rng=np.random.default_rng(0), lr=5e-4, val_images=val, val_every=100)
    print(f"trained {len(hist.losses)} steps, best validation at step {hist.best_step}")

size = 64 if len(sys.argv) > 1 else 32
clean = np.stack([phantom(np.random.default_rng(3000 + i), size) for i in range(8)])
Y = np.stack([simulate_motion(c, random_trajectory(np.random.default_rng(4000 + i), size, 3)) for i, c in enumerate(clean)])

# %%
# Too small an n leaves the ghosts in place; too large an n lets the model
# invent structure. Scan a few values and watch NMSE.
for n in (0, 25, 75, 150, 300):
    out = np.clip(correct(Y, n, model, sched, np.random.default_rng(5)), 0, 1)
    s = np.mean([metrics.ssim(o, c) for o, c in zip(out, clean)])
    e = np.mean([metrics.nmse(o, c) for o, c in zip(out, clean)])
    print(f"n={n:3d}  SSIM {s:.3f}  NMSE {e:.4f}")
