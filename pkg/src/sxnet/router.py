"""Classical switch programming for the rearrangeable exchange/shuffle stack.

The network for 2**k wires runs 2k-1 exchange stages (adjacent pairs, one
straight/crossed bit per switch) separated by 2k-2 shuffle stages, left
rotations in the first half and right rotations in the second, exactly the
wiring the neural model's layer plan uses. route_permutation programs the
switch bits for an arbitrary permutation via the recursive looping
algorithm: 2-coloring the pairing constraints of the outer stages splits
the problem into two independent half-size instances.

Messages meeting at stage d share their depth-d switch by construction, so
exit bits computed on the recursion tree translate to physical switch bits
by tracking message positions through the stack.
"""

from __future__ import annotations

import numpy as np

from .model import rotate_index, shuffle_permutation


class RoutingError(ValueError):
    """Input is not a permutation or settings are malformed."""


def _validate_permutation(perm, k: int) -> list[int]:
    n = 1 << k
    p = [int(v) for v in perm]
    if len(p) != n or sorted(p) != list(range(n)):
        raise RoutingError(f"not a permutation of 0..{n - 1}: {perm}")
    return p


def _loop_color(p: list[int]) -> list[int]:
    """Assign each message a half-network, alternating around constraint loops.

    Two messages sharing an input switch or an output switch must part ways.
    Each loop is seeded at the even wire of the lowest unassigned switch,
    colored straight (keep its own low bit).
    """
    n = len(p)
    inv = [0] * n
    for src, dst in enumerate(p):
        inv[dst] = src
    color = [-1] * n
    for sw in range(n // 2):
        seed = 2 * sw
        if color[seed] >= 0:
            continue
        stack = [(seed, 0)]
        while stack:
            msg, c = stack.pop()
            if color[msg] >= 0:
                continue
            color[msg] = c
            stack.append((msg ^ 1, 1 - c))
            stack.append((inv[p[msg] ^ 1], 1 - c))
    return color


def _route_rec(p: list[int], members: list[int], depth: int, k: int, exit_bits) -> None:
    t = k - depth
    if t == 1:
        exit_bits[k - 1][members[0]] = p[0]
        exit_bits[k - 1][members[1]] = p[1]
        return
    color = _loop_color(p)
    stage_in, stage_out = depth, 2 * k - 2 - depth
    half = len(p) // 2
    sub_p = [[0] * half, [0] * half]
    sub_members = [[0] * half, [0] * half]
    for msg, c in enumerate(color):
        exit_bits[stage_in][members[msg]] = c
        exit_bits[stage_out][members[msg]] = p[msg] & 1
        sub_p[c][msg >> 1] = p[msg] >> 1
        sub_members[c][msg >> 1] = members[msg]
    for c in (0, 1):
        _route_rec(sub_p[c], sub_members[c], depth + 1, k, exit_bits)


def _shuffle_direction(stage: int, k: int) -> str:
    return "left" if stage < k - 1 else "right"


def route_permutation(perm, k: int) -> list[np.ndarray]:
    """Switch bits per exchange stage realizing dst = perm[src]."""
    p = _validate_permutation(perm, k)
    n = 1 << k
    if k == 1:
        return [np.array([p[0] == 1])]
    exit_bits = [[-1] * n for _ in range(2 * k - 1)]
    _route_rec(p, list(range(n)), 0, k, exit_bits)

    settings = []
    pos = list(range(n))
    for stage in range(2 * k - 1):
        at = [0] * n
        for msg, q in enumerate(pos):
            at[q] = msg
        bits = np.zeros(n // 2, dtype=bool)
        for sw in range(n // 2):
            u, v = at[2 * sw], at[2 * sw + 1]
            eu, ev = exit_bits[stage][u], exit_bits[stage][v]
            if eu == ev:
                raise RoutingError(f"stage {stage} switch {sw}: colliding exit bits")
            bits[sw] = eu == 1
            pos[u] = 2 * sw + eu
            pos[v] = 2 * sw + ev
        settings.append(bits)
        if stage < 2 * k - 2:
            direction = "right" if _shuffle_direction(stage, k) == "left" else "left"
            pos = [rotate_index(q, k, direction) for q in pos]
    for msg in range(n):
        if pos[msg] != p[msg]:
            raise RoutingError(f"routing self-check failed for message {msg}")
    return settings


def simulate_routing(settings, k: int) -> list[int]:
    """Push indexed messages through the stack; returns the realized permutation."""
    n = 1 << k
    if len(settings) != 2 * k - 1:
        raise RoutingError(f"need {2 * k - 1} exchange stages, got {len(settings)}")
    wires = np.arange(n)
    for stage, bits in enumerate(settings):
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != (n // 2,):
            raise RoutingError(f"stage {stage}: expected {n // 2} switch bits, got {bits.shape}")
        pairs = wires.reshape(n // 2, 2)
        swapped = pairs[:, ::-1]
        pairs = np.where(bits[:, None], swapped, pairs)
        wires = pairs.reshape(n)
        if len(np.unique(wires)) != n:
            raise RoutingError(f"stage {stage}: wire collision")
        if stage < 2 * k - 2:
            wires = wires[shuffle_permutation(k, _shuffle_direction(stage, k))]
    out = [0] * n
    for position, msg in enumerate(wires):
        out[int(msg)] = position
    return out


def shuffle_only_permutation(k: int) -> list[int]:
    """Permutation realized by the shuffle stages alone (all switches straight)."""
    return simulate_routing([np.zeros((1 << k) // 2, dtype=bool)] * (2 * k - 1), k)
