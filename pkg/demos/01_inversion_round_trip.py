"""DDIM inversion and reconstruction, and why step count matters.

A constant denoiser makes the inversion exactly invertible: inverting and
then sampling over the same ladder returns the input up to float error.
A real network is only approximately consistent between neighbouring
timesteps, so the round trip leaves a residual that shrinks as the
ladder gets finer. The small seeded U-Net shows that halving.

    python3 demos/01_inversion_round_trip.py
"""
import numpy as np

from xavdt.diffusion import (Conditioning, ConstantDenoiser, TinyUNetConfig, TinyUNetDenoiser, ddim_invert,
                             ddim_sample, make_schedule)

sched = make_schedule(1000)
rng = np.random.default_rng(0)
z0 = rng.normal(size=(2, 3, 8, 8))

print("ladder for 10 steps:", sched.timesteps(10).tolist())

const = ConstantDenoiser(0.4)
zT = ddim_invert(z0, None, const, sched, 40)
err = np.abs(ddim_sample(zT, None, const, sched, 40) - z0).max()
print(f"constant denoiser, 40 steps: max |z0_hat - z0| = {err:.2e}")

unet = TinyUNetDenoiser(TinyUNetConfig(seed=0))
cond = Conditioning(rng.normal(size=(2, 5, 16)), rng.normal(size=(3, 8, 8)))
print("\nseeded U-Net round-trip residual (L2):")
for steps in (10, 20, 40, 80):
    zT = ddim_invert(z0, cond, unet, sched, steps)
    res = np.linalg.norm(ddim_sample(zT, cond, unet, sched, steps) - z0)
    print(f"  {steps:3d} steps  {res:.4f}")
