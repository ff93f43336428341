"""tractfuse: procedural diffusion phantoms, RL streamline-tracking policies,
and a sequence-model fusion policy, built on a small numpy autodiff core."""

__version__ = "0.1.0"
