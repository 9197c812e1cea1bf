"""Jazz melody generation with a recurrent VAE and transfer learning.

Subpackages are organised by pipeline stage: corpus handling, feature
extraction, overlapping-area evaluation, a small autodiff engine, the model,
training regimes, and the command line.
"""

__version__ = "0.1.0"

BARS = 4
STEPS_PER_BAR = 16
N_STEPS = BARS * STEPS_PER_BAR
LOWEST_PITCH = 48  # C3 with C4 = 60
N_PITCHES = 48
HIGHEST_PITCH = LOWEST_PITCH + N_PITCHES - 1  # B6
