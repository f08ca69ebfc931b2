"""AttaNet at desk scale: strip attention, attention fusion, and the tooling
to verify them (finite-difference gradients, brute-force oracles, analytic
FLOP models)."""

__version__ = "0.1.0"
