"""
The generator's optimum in a finite game
========================================

With finite state spaces the discriminator has a closed form and the
generator's best response can be found by brute force over a simplex grid.
An injective channel pins the signal distribution down; a non-injective one
leaves a whole family of equally good generators. Mixing an identity branch
with a noisy branch moves the optimum away from both components.
"""

# %%
import numpy as np

from hidden_ambient import discrete_game as game
from hidden_ambient import measurements as meas
from hidden_ambient.measurements import DiscreteChannel, MeasurementSpec

p_x = np.array([0.1, 0.2, 0.3, 0.4])
ch = meas.build_channel_matrix(MeasurementSpec("block_pixel", p=0.5), meas.binary_images((1, 2)))
p_y = game.pushforward(ch, p_x)
print("measured distribution over", ch.matrix.shape[1], "outputs:", np.round(p_y, 3))

# %% the discriminator at its optimum, and the value there
p_g = np.full(4, 0.25)
q_g = game.pushforward(ch, p_g)
d_star = game.optimal_discriminator(p_y, q_g)
v = game.game_value(p_y, q_g, d_star)
print("V(D*) =", round(v, 6), " 2*JS - 2 log 2 =", round(2 * game.js_divergence(p_y, q_g) - 2 * np.log(2), 6))

# %% injective: unique minimizer on the grid
rep = game.generator_optimum_grid_search(ch, p_y, 0.05)
print("injective channel minimizers:", rep.minimizers)

# %% non-injective: block everything and every generator ties
blind = meas.build_channel_matrix(MeasurementSpec("block_pixel", p=1.0), meas.binary_images((1, 2)))
rep = game.generator_optimum_grid_search(blind, [1.0], 0.05)
print("fully blocked channel:", len(rep.minimizers), "co-minimizers")

# %% a hidden mixture of identity and a lossy channel
noise = DiscreteChannel(np.array([[1.0, 0.0], [0.5, 0.5]]))
for p2 in (0.0, 0.5, 1.0):
    out = game.mixture_optimum_analysis(game.MixtureGameConfig(p2, DiscreteChannel.identity(2), noise),
                                        [0.6, 0.4], 0.01)
    print(f"p2={p2}: mixture {out['mixture']['minimizers']}, identity part "
          f"{out['identity_component']['minimizers']}, noise part {out['noise_component']['minimizers']}, "
          f"agreement={out['agreement']}")
