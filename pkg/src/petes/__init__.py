"""Privacy-enhanced transactions over garlic-onion routing, a two-way peg and a policy module."""

__version__ = "0.1.0"
