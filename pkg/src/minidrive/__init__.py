"""Desk-scale driving world-model VLA on a synthetic 2-D world."""

__version__ = "0.1.0"

from . import (action_expert, autodiff, backbone, checkpoint, config, dataset,
               diffusion, experiments, gridworld, latency, metrics, optim,
               params, tokenizers, training)

__all__ = [
    "action_expert", "autodiff", "backbone", "checkpoint", "config", "dataset",
    "diffusion", "experiments", "gridworld", "latency", "metrics", "optim",
    "params", "tokenizers", "training", "__version__",
]
