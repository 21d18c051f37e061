"""Bridge between raw datasets / scoring models and the demonstration
selection pipeline's external interfaces (icdstore/v1 files and the
saber-score/v1 TCP protocol)."""

__all__ = ["encoder", "extract", "server", "pseudo", "storeio"]
