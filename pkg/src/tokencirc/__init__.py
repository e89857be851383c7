"""Self-stabilizing random-walk token circulation: protocol simulator and walk analysis."""

__version__ = "0.1.0"
