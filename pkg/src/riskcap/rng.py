"""Named, counter-based random streams derived from one root seed.

Each consumer asks for ``stream(seed, "path/of/consumer")``; the Philox key
is a hash of the root seed and the name, so adding a consumer never shifts
the numbers another consumer sees.
"""

import hashlib

import numpy as np


def subseed(seed, name):
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed, name):
    return np.random.Generator(np.random.Philox(key=subseed(seed, name)))
