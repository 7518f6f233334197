"""Point-to-point navigation in box worlds: recurrent SAC agent and NavMesh baseline."""

__version__ = "0.1.0"
