"""Seed expansion.

Every consumer of randomness asks for a generator by name. The name is
hashed with CRC-32 and combined with the run seed into a ``SeedSequence``
whose state keys a Philox counter-based bit generator. Two consumers with
different names therefore draw independent streams, and adding a new
consumer never perturbs existing ones.
"""

import zlib

import numpy as np


def consumer_key(name):
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed, consumer):
    """Return the generator for ``consumer`` under run seed ``seed``."""
    ss = np.random.SeedSequence([int(seed), consumer_key(consumer)])
    return np.random.Generator(np.random.Philox(ss))
