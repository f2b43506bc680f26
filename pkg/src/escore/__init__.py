"""Desk-scale lab for one-step generative sampling via energy-distance scoring.

Library layout:

- ``graph``    differentiable computation graphs (forward, reverse, jvp)
- ``nn``       layers, blocks, Adam, checkpoints
- ``data``     toy generators (Swiss roll, Gaussian, class-conditional traces)
- ``heads``    the five continuous sampling heads and their losses/samplers
- ``mar``      masked autoregressive training, parallel decoding, CFG, distillation
- ``metrics``  energy distance, MMD, assignment Wasserstein
- ``cli``      command-line front end (``escore`` entry point)
"""
__version__ = "0.1.0"
