"""Small random networks for cross-checking against brute force."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .network import Bus, Feeder, Mode, Network


def random_network(seed: int, mode: Mode = Mode.RECONFIGURATION, n_bus: Optional[int] = None,
                   n_ties: Optional[int] = None, max_feeders: int = 8) -> Network:
    """Random spanning tree plus tie lines, all switchable, in per-unit.

    Reconfiguration networks get one strong substation at bus ``b0``.
    Restoration networks keep the substation switched off and add one or
    two DG roots that cannot cover the whole load.
    """
    rng = np.random.default_rng(seed)
    n = int(n_bus if n_bus is not None else rng.integers(5, 7))
    ties = int(n_ties if n_ties is not None else rng.integers(2, 4))
    ties = min(ties, max_feeders - (n - 1))
    if ties < 0:
        raise ValueError(f"{n} buses need more than {max_feeders} feeders")

    ids = [f"b{k}" for k in range(n)]
    loads = rng.uniform(0.02, 0.10, size=n)
    loads[0] = 0.0
    pf = rng.uniform(0.3, 0.5, size=n)

    edges: list[tuple[int, int]] = []
    for k in range(1, n):
        edges.append((int(rng.integers(0, k)), k))
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)
             if (a, b) not in edges and (b, a) not in edges]
    for idx in rng.permutation(len(pairs))[:ties]:
        edges.append(pairs[int(idx)])

    dg_buses: list[int] = []
    if mode is Mode.RESTORATION:
        n_dg = int(rng.integers(1, 3))
        dg_buses = sorted(int(b) for b in rng.choice(np.arange(1, n), size=n_dg, replace=False))
        share = rng.uniform(0.4, 0.7) * loads.sum() / n_dg

    buses = []
    for k, bid in enumerate(ids):
        kw = dict(id=bid, load_p=float(loads[k]), load_q=float(loads[k] * pf[k]))
        if k == 0:
            kw.update(is_root=True, gen_p_max=5.0, gen_q_min=-5.0, gen_q_max=5.0)
            if mode is Mode.RESTORATION:
                kw["fixed_state"] = 0
        elif k in dg_buses:
            kw.update(is_root=True, gen_p_max=float(share),
                      gen_q_min=-float(share) * 0.5, gen_q_max=float(share) * 0.5)
        buses.append(Bus(**kw))

    feeders = []
    for m, (a, b) in enumerate(edges):
        r = float(rng.uniform(0.005, 0.03))
        x = float(r * rng.uniform(0.5, 1.5))
        feeders.append(Feeder(id=f"f{m}", from_bus=ids[a], to_bus=ids[b], r=r, x=x,
                              i_max=float(rng.uniform(1.0, 2.0))))
    return Network(buses=tuple(buses), feeders=tuple(feeders),
                   name=f"random-{mode.value}-{seed}")
