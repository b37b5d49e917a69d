"""Named substreams derived from one master seed.

Every stochastic draw in a run flows through one of these streams, so two
runs with equal configs are bit-identical and parallel evaluation order
cannot perturb results.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream; deterministic in (master_seed, name)."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, _name_key(name)])
    return np.random.Generator(np.random.PCG64(seq))


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng
