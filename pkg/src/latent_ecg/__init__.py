"""ECG beat classification from latent-ODE initial states."""

__version__ = "0.1.0"
