"""Hypocoercive generators: exact commutator algebra, coefficient certification,
semigroup oracles, lattice experiments and Gronwall envelopes."""

__version__ = "0.1.0"
