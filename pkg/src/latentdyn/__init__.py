"""Action-free 3D latent-dynamics pre-training on point clouds.

Subpackages and modules map one-to-one onto the system's parts:
numerics (autodiff core), data (synthetic trajectories + ingestion math),
encoder (tokenizer + EMA teacher), dynamics (latent actions + diffusion
forward model), objective (variance-regularized matching), trainer,
evaluate (probes), cli.
"""

__version__ = "0.1.0"
