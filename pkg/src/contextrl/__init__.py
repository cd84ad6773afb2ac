"""Meta-RL with online task inference over a joint global/local latent space."""

__version__ = "0.1.0"
