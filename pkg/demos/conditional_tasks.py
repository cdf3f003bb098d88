"""One mechanism, four tasks: clamp what is known, diffuse the rest.

Trains briefly (or loads a checkpoint written by ``unidiff train``), then
draws a grid from a caption, a caption from a grid, and repaints the top
rows of a grid while rewriting the caption's color slot.

    python demos/conditional_tasks.py [checkpoint]
"""

import sys

import numpy as np

from unidiff.denoiser import Denoiser, SequenceSpec, preset
from unidiff.sampler import KnownMask, SamplerConfig, generate
from unidiff.schedule import linear_schedule
from unidiff.trainer import TrainConfig, load_params, train
from unidiff.world import WorldConfig, caption_words, generate_dataset, records_to_array, render_text

world = WorldConfig()
layout = world.layout()
seq = SequenceSpec(world.lengths, grids=((world.rows, world.cols), None))
schedule = linear_schedule(100)
model = Denoiser(preset("toy", dtype="float32"), layout, seq, schedule.T, seed=0)
if len(sys.argv) > 1:
    load_params(sys.argv[1], model, schedule)
else:
    train(TrainConfig(steps=600), records_to_array(generate_dataset(1000, 0, world), layout), model, schedule)

n_grid = world.rows * world.cols
source = generate_dataset(1, seed=11, world=world)[0].fused(layout)


def show(title, row):
    print(title)
    print(render_text(row[:n_grid], layout, world))
    print(caption_words(row[n_grid:], layout, world), end="\n\n")


show("source pair", source)
for task in ("t2i", "i2t"):
    known = KnownMask.for_task(task, seq.position_modality, source)
    out = generate(SamplerConfig(task=task, stride=5, seed=1), model, schedule, layout, known=known)
    show(f"{task}: regenerated {'grid' if task == 't2i' else 'caption'}", out.indices[0])

edited = source.copy()
edited[n_grid + 1] = layout.offsets[1] + world.words.index("navy")
region = np.zeros(source.size, bool)
region[: 3 * world.cols] = True
known = KnownMask.for_task("infill", seq.position_modality, edited, region=region)
out = generate(SamplerConfig(task="infill", stride=5, seed=1), model, schedule, layout, known=known)
show("infill: top three rows repainted, caption color set to 'navy'", out.indices[0])
