"""Which tokens move when one control signal changes?

Builds a small PCM layer with random weights, perturbs the audio embedding and
prints a per-frame map of changed cells. Only the mouth box lights up.
"""
import numpy as np

from pcmamba.masks import Rect, TokenLayout, make_masks, unflatten
from pcmamba.pcm import GateConfig, PcmParams, pcm_forward
from pcmamba.verify import random_pcm

rng = np.random.default_rng(0)
lay = TokenLayout(frames=2, height=6, width=6, channels=4)
face, audio, motion = make_masks(Rect(4, 1, 6, 5), Rect(0, 0, 6, 6), lay)
p = random_pcm(rng, c=4, d_id=3, d_ctl=5, d_state=4)

z = rng.standard_normal((1, lay.n_tokens, 4))
e_id = rng.standard_normal((1, 3))
e_audio = rng.standard_normal((1, lay.frames, 5))
e_motion = rng.standard_normal((1, lay.frames, 5))

base = pcm_forward(z, e_id, e_audio, e_motion, audio, motion, GateConfig(1, 1), p, lay).data
moved = pcm_forward(z, e_id, e_audio + 0.1, e_motion, audio, motion, GateConfig(1, 1), p, lay).data
changed = np.any(unflatten(base != moved, lay)[0], axis=-1)

for t in range(lay.frames):
    print(f"frame {t}: cells changed by the audio perturbation")
    for row in changed[t]:
        print("  " + " ".join("#" if v else "." for v in row))
print("audio mask:")
for row in audio.grid:
    print("  " + " ".join("#" if v else "." for v in row))
