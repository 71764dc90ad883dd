"""Language-conditioned goal-pose generation for tabletop rearrangement.

Modules: ``geometry`` (poses, boxes, views, point clouds), ``scene``
(objects, relation regions), ``physics`` (collision, stability, settle),
``datagen`` (procedural datasets), ``nn`` (autodiff layers, Adam,
checkpoints), ``encoder`` (conditioning tokens), ``diffusion`` (pose DDPM),
``evaluation`` (metrics) and ``cli``.
"""
__version__ = "0.1.0"
