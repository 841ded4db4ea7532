"""Independent reference implementations used by several test modules."""

import math
from itertools import combinations


def all_matchings(layers, k):
    """Every set of k disjoint pairs over ``layers``."""
    layers = sorted(layers)
    if k == 0:
        yield ()
        return
    if len(layers) < 2 * k:
        return
    first, rest = layers[0], layers[1:]
    # either ``first`` is unmatched ...
    yield from all_matchings(rest, k)
    # ... or paired with some later layer
    for partner in rest:
        remaining = [l for l in rest if l != partner]
        for m in all_matchings(remaining, k - 1):
            yield ((first, partner),) + m


def exhaustive_greedy(dist, lir, n_layers, r_l):
    """Smallest matching under the ascending (distance, i, j) order.

    The greedy rule picks the globally smallest key first, then the smallest
    compatible key, and so on; that is the matching of the right size whose
    sorted key sequence is lexicographically least.
    """
    quota = math.ceil(round(n_layers * r_l, 9))
    if quota == 0:
        return ()
    k = min(math.ceil(quota / 2), len(lir) // 2)
    best = None
    for m in all_matchings(lir, k):
        key = sorted((dist[(i, j)], i, j) for i, j in m)
        if best is None or key < best:
            best = key
    return tuple((i, j) for _, i, j in best) if best else ()
