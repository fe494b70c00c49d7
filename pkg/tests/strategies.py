"""Random polynomial fields shared by the algebra tests."""

from __future__ import annotations

import random
from fractions import Fraction

from hypothesis import strategies as st

from artifact.liealg import Polynomial, VectorField


def random_polynomial(rng: random.Random, m: int, max_deg: int = 3, max_terms: int = 4) -> Polynomial:
    terms = {}
    for _ in range(rng.randint(0, max_terms)):
        exp = [0] * m
        for _ in range(rng.randint(0, max_deg)):
            exp[rng.randrange(m)] += 1
        terms[tuple(exp)] = Fraction(rng.randint(-5, 5), rng.randint(1, 4))
    return Polynomial(m, terms)


def random_field(rng: random.Random, m: int, max_deg: int = 3) -> VectorField:
    return VectorField(tuple(random_polynomial(rng, m, max_deg) for _ in range(m)))


seeds = st.integers(min_value=0, max_value=2**31 - 1)
dims = st.integers(min_value=1, max_value=3)
