"""Cross-silo federated learning simulator with local differential privacy
and model-sharing ensembles."""

__version__ = "0.1.0"
