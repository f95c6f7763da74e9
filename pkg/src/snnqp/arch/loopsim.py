"""Brute-force loop-nest walk used as a counting oracle for small layers.

Every MAC of the mapped nest is visited in program order. A buffer refills
when the indices of the tensor-relevant loops above it change between
consecutive visits; the words moved per refill are the distinct addresses the
tile actually touches. Optional spike and weight arrays let the walk skip
MACs exactly the way the hardware would.
"""

from __future__ import annotations

import itertools
from collections import defaultdict

import numpy as np

from .model import SKIPPING_FORMATS, InvalidMappingError, validate_mapping
from .spec import RELEVANT, ArchitectureSpec, Mapping, Workload


def _loops(mapping: Mapping):
    loops = [("DRAM", d, f) for d, f in mapping.dram]
    loops += [("GLB", d, f) for d, f in mapping.glb]
    loops += [(lv, sp[0], sp[1]) for lv, sp in (("ROW", mapping.row), ("COL", mapping.col)) if sp]
    loops += [("PE", d, f) for d, f in mapping.pe]
    return loops


def _coords(loops, idx):
    """Global per-dim coordinate of one point of the nest."""
    out = defaultdict(int)
    for (_, d, f), i in zip(loops, idx):
        out[d] = out[d] * f + i
    return out


def simulate_counts(workload: Workload, arch: ArchitectureSpec, mapping: Mapping,
                    spikes: np.ndarray | None = None, weights: np.ndarray | None = None
                    ) -> dict[tuple[str, str, str], int]:
    """Word counts keyed by ``(level, tensor, op)``.

    ``spikes`` has shape ``(T, C, H, W)`` and ``weights`` ``(M, C, R, S)``;
    when given they drive input read skipping and sparse-weight skipping.
    """
    wl = workload
    counts: dict = defaultdict(int)
    if wl.macs == 0:
        return dict(counts)
    v = validate_mapping(wl, arch, mapping)
    if v:
        raise InvalidMappingError(v)
    s = wl.stride
    loops = _loops(mapping)
    n_dram = len(mapping.dram)
    n_arr = n_dram + len(mapping.glb)
    n_pe = n_arr + (mapping.row is not None) + (mapping.col is not None)
    points = []
    for idx in itertools.product(*(range(f) for _, _, f in loops)):
        c = _coords(loops, idx)
        t, m, ch, p, q, r, sx = (c[d] for d in "TMCPQRS")
        points.append((idx, {
            "W": (m, ch, r, sx),
            "I": (t, ch, p * s + r, q * s + sx),
            "O": (m, p, q),
            "S": (t, m, p, q),
        }))

    def key(idx, upto, tensor):
        return tuple(i for (_, d, _), i in zip(loops[:upto], idx[:upto]) if d in RELEVANT[tensor])

    def tiles(upto, tensor, group_extra=()):
        """Ordered (tile key, distinct addresses) per refill for each buffer instance."""
        inst_tiles = defaultdict(list)   # instance -> [(key, set)]
        for idx, addr in points:
            inst = tuple(idx[a] for a in group_extra)
            k = key(idx, upto, tensor)
            seq = inst_tiles[inst]
            if not seq or seq[-1][0] != k:
                seq.append((k, set()))
            seq[-1][1].add(addr[tensor])
        return inst_tiles

    spatial = tuple(range(n_arr, n_pe))

    # weights: DRAM -> array (bypassing GLB), array -> each PE's W-Spad
    for seq in tiles(n_arr, "W").values():
        counts["DRAM", "W", "read"] += sum(len(a) for _, a in seq)
    for seq in tiles(n_arr, "W", spatial).values():
        counts["WSpad", "W", "write"] += sum(len(a) for _, a in seq)

    # input spikes
    for seq in tiles(n_dram, "I").values():
        words = sum(len(a) for _, a in seq)
        counts["DRAM", "I", "read"] += words
        counts["GLB", "I", "write"] += words
    for seq in tiles(n_arr, "I").values():
        counts["GLB", "I", "read"] += sum(len(a) for _, a in seq)
    for seq in tiles(n_arr, "I", spatial).values():
        counts["IFSpad", "I", "write"] += sum(len(a) for _, a in seq)

    # membrane state: spad traffic per pass, spills on displacement
    passes = defaultdict(set)
    for idx, addr in points:
        passes[idx[:n_arr], idx[n_arr:n_pe]].add(addr["O"])
    vmem = sum(len(a) for a in passes.values())
    counts["VmemSpad", "O", "read"] += vmem
    counts["VmemSpad", "O", "write"] += vmem
    for upto, level_pairs in ((n_arr, (("GLB", "read"), ("GLB", "write"))),
                              (n_dram, (("DRAM", "read"), ("DRAM", "write"),
                                        ("GLB", "write"), ("GLB", "read")))):
        residencies = defaultdict(int)
        for seq in tiles(upto, "O").values():
            for _, addrs in seq:
                for a in addrs:
                    residencies[a] += 1
        spills = sum(n - 1 for n in residencies.values())
        for level, op in level_pairs:
            counts[level, "O", op] += spills

    # output spikes and threshold compares
    frames = len({addr["S"] for _, addr in points})
    for level, op in (("GLB", "write"), ("GLB", "read"), ("DRAM", "write")):
        counts[level, "S", op] += frames
    counts["VthReg", "Vth", "read"] += frames

    # PE reads with exact skipping
    skip_w = weights is not None and wl.weight_format in SKIPPING_FORMATS
    w_reads = 0
    for _, addr in points:
        if arch.input_skipping and spikes is not None and not spikes[addr["I"]]:
            continue
        if skip_w and weights[addr["W"]] == 0:
            continue
        w_reads += 1
    counts["WSpad", "W", "read"] += w_reads
    counts["IFSpad", "I", "read"] += len(points)
    return dict(counts)
