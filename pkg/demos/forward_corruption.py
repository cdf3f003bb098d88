"""Watch one synthetic pair dissolve into masks under the forward process.

Prints the grid and caption at a handful of levels, then the closed-form
marginal of a single token next to its Monte Carlo frequency.

    python demos/forward_corruption.py
"""

import numpy as np

from unidiff.kernel import q_xt_given_x0, sample_forward
from unidiff.layout import TokenSequence
from unidiff.schedule import linear_schedule
from unidiff.world import WorldConfig, caption_words, generate_dataset, render_text

world = WorldConfig()
layout = world.layout()
schedule = linear_schedule(100)
record = generate_dataset(1, seed=4, world=world)[0]
x0 = TokenSequence(record.fused(layout), layout, world.lengths)
rng = np.random.default_rng(0)
n_grid = world.rows * world.cols

for t in (0, 25, 50, 75, 100):
    xt = sample_forward(t, x0, schedule, rng).indices
    print(f"t = {t}  (keep {schedule.alpha_bar[t]:.2f}, mask {schedule.gamma_bar[t]:.2f})")
    print(render_text(xt[:n_grid], layout, world))
    print(caption_words(xt[n_grid:], layout, world), end="\n\n")

token = int(x0.indices[n_grid + 1])  # the color word
q = q_xt_given_x0(40, token, schedule, layout)
draws = sample_forward(np.full(20_000, 40), TokenSequence(np.full((20_000, 1), token), layout, [0, 1]),
                       schedule, rng).indices[:, 0]
freq = np.bincount(draws, minlength=layout.total) / draws.size
print("token", token, "at t = 40: closed form vs sampled")
for i in np.flatnonzero((q > 0) | (freq > 0)):
    print(f"  x_t = {i:2d}  q = {q[i]:.4f}  freq = {freq[i]:.4f}")
