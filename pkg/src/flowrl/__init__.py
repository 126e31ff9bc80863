"""Flow-based latent-action offline RL: conditional flows with bounded
latent spaces, advantage-weighted latent policies, toy environments, and
density studies on a two-moons benchmark."""

__version__ = "0.1.0"
