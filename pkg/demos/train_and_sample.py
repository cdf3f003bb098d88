"""Train a small denoiser on synthetic pairs, then generate new pairs from scratch.

A few hundred steps already move the held-out bound and the share of
generated pairs whose caption matches their grid. Pass a step count to go
further (the acceptance run uses 5000).

    python demos/train_and_sample.py [steps]
"""

import sys
import time

import numpy as np

from unidiff.denoiser import Denoiser, SequenceSpec, preset
from unidiff.oracle import chance_rate_mc
from unidiff.sampler import SamplerConfig, generate
from unidiff.schedule import linear_schedule
from unidiff.trainer import TrainConfig, heldout_vlb, train
from unidiff.world import WorldConfig, caption_words, consistency_check, generate_dataset, records_to_array, \
    render_text

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
world = WorldConfig()
layout = world.layout()
data = records_to_array(generate_dataset(1100, seed=0, world=world), layout)
seq = SequenceSpec(world.lengths, grids=((world.rows, world.cols), None))
schedule = linear_schedule(100)
model = Denoiser(preset("toy", dtype="float32"), layout, seq, schedule.T, seed=0)

before = heldout_vlb(data[1000:], model, schedule)
start = time.perf_counter()
train(TrainConfig(steps=steps), data[:1000], model, schedule)
print(f"{steps} steps in {time.perf_counter() - start:.0f} s")
print(f"held-out bound per pair: {before:.1f} -> {heldout_vlb(data[1000:], model, schedule):.1f} nats")

out = generate(SamplerConfig(task="pair", seed=0), model, schedule, layout, count=50).indices
n_grid = world.rows * world.cols
ok = [consistency_check(r[:n_grid] - layout.offsets[0], r[n_grid:] - layout.offsets[1], world).consistent
      for r in out]
chance, _ = chance_rate_mc(world, 5000, np.random.default_rng(0))
print(f"consistent pairs: {np.mean(ok):.2f} (chance {chance:.2f})\n")
for row in out[:3]:
    print(render_text(row[:n_grid], layout, world))
    print(caption_words(row[n_grid:], layout, world), end="\n\n")
