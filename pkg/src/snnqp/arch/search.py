"""Causality-constrained mapping search.

The candidate space: T untiled and outermost at DRAM; every other dim split
into DRAM x GLB x PE-local factors, optionally with one dim on the PE rows
and a different one on the columns; all orders of the DRAM and GLB loops.
PE-local loops stay in canonical order since nothing above the scratchpads
observes their order.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass
from typing import Iterator

from .model import EnergyReport, evaluate, validate_mapping
from .spec import DIMS, ArchitectureSpec, Mapping, Workload

TILED_DIMS = DIMS[1:]


class InfeasibleMappingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchResult:
    mapping: Mapping
    report: EnergyReport
    ranked: tuple  # ((mapping, report), ...) best first
    space_size: int
    exhaustive: bool


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def splits3(n: int) -> list[tuple[int, int, int]]:
    """Ordered factorizations n = a*b*c."""
    return [(a, b, n // a // b) for a in divisors(n) for b in divisors(n // a)]


def spatial_options(workload: Workload, limit: int) -> list[tuple[str, int] | None]:
    opts: list = [None]
    for d in TILED_DIMS:
        opts += [(d, f) for f in divisors(workload.dims[d]) if 1 < f <= limit]
    return opts


def _grid_choices(workload: Workload, arch: ArchitectureSpec):
    for row in spatial_options(workload, arch.pe_rows):
        for col in spatial_options(workload, arch.pe_cols):
            if row and col and row[0] == col[0]:
                continue
            yield row, col


def _remaining(workload: Workload, row, col) -> dict[str, int]:
    rest = {d: workload.dims[d] for d in TILED_DIMS}
    for sp in (row, col):
        if sp:
            rest[sp[0]] //= sp[1]
    return rest


def space_size(workload: Workload, arch: ArchitectureSpec) -> int:
    """Number of candidates, counting k! orders per level (DP over dims)."""
    total = 0
    for row, col in _grid_choices(workload, arch):
        states = {(0, 0): 1}  # (#DRAM loops, #GLB loops) -> ways
        for n in _remaining(workload, row, col).values():
            nxt: dict = {}
            for a, b, _ in splits3(n):
                da, db = int(a > 1), int(b > 1)
                for (kd, kg), w in states.items():
                    k = (kd + da, kg + db)
                    nxt[k] = nxt.get(k, 0) + w
            states = nxt
        total += sum(w * math.factorial(kd) * math.factorial(kg) for (kd, kg), w in states.items())
    return total


def _build(workload, row, col, split, dram_order, glb_order) -> Mapping:
    t = workload.dims["T"]
    return Mapping(
        dram=(("T", t),) + tuple((d, split[d][0]) for d in dram_order),
        glb=tuple((d, split[d][1]) for d in glb_order),
        pe=tuple((d, split[d][2]) for d in TILED_DIMS if split[d][2] > 1),
        row=row, col=col,
    )


def enumerate_mappings(workload: Workload, arch: ArchitectureSpec) -> Iterator[Mapping]:
    """Every candidate in a fixed order (validity not checked)."""
    for row, col in _grid_choices(workload, arch):
        rest = _remaining(workload, row, col)
        for combo in itertools.product(*(splits3(rest[d]) for d in TILED_DIMS)):
            split = dict(zip(TILED_DIMS, combo))
            dram = [d for d in TILED_DIMS if split[d][0] > 1]
            glb = [d for d in TILED_DIMS if split[d][1] > 1]
            for do in itertools.permutations(dram):
                for go in itertools.permutations(glb):
                    yield _build(workload, row, col, split, do, go)


def sample_mapping(workload: Workload, arch: ArchitectureSpec, rng: random.Random,
                   grid=None) -> Mapping:
    grid = grid if grid is not None else list(_grid_choices(workload, arch))
    row, col = rng.choice(grid)
    rest = _remaining(workload, row, col)
    split = {d: rng.choice(splits3(rest[d])) for d in TILED_DIMS}
    dram = [d for d in TILED_DIMS if split[d][0] > 1]
    glb = [d for d in TILED_DIMS if split[d][1] > 1]
    rng.shuffle(dram)
    rng.shuffle(glb)
    return _build(workload, row, col, split, dram, glb)


def search_mappings(workload: Workload, arch: ArchitectureSpec, budget: int = 2000,
                    objective: str = "energy", seed: int = 0,
                    max_attempts_factor: int = 50) -> SearchResult:
    """Best valid mapping by ``(objective, mapping key)``.

    Exhaustive when the space holds at most ``budget`` candidates, otherwise
    ``budget`` distinct valid candidates drawn with ``random.Random(seed)``.
    """
    if budget < 1:
        raise ValueError("search budget must be >= 1")
    if objective not in ("energy", "edp"):
        raise ValueError(f"unknown objective {objective!r}")
    if workload.macs == 0:
        m = Mapping()
        rep = evaluate(workload, arch, m)
        return SearchResult(m, rep, ((m, rep),), 1, True)

    size = space_size(workload, arch)
    exhaustive = size <= budget
    scored = []
    if exhaustive:
        for m in enumerate_mappings(workload, arch):
            if not validate_mapping(workload, arch, m):
                scored.append((m, evaluate(workload, arch, m)))
    else:
        rng = random.Random(seed)
        grid = list(_grid_choices(workload, arch))
        seen = set()
        for _ in range(budget * max_attempts_factor):
            if len(scored) >= budget:
                break
            m = sample_mapping(workload, arch, rng, grid)
            k = m.key()
            if k in seen:
                continue
            seen.add(k)
            if not validate_mapping(workload, arch, m):
                scored.append((m, evaluate(workload, arch, m)))
    if not scored:
        how = "in the full space" if exhaustive else f"after {budget * max_attempts_factor} samples"
        raise InfeasibleMappingError(
            f"no valid mapping for {workload.name} {how}; first violation on the flat mapping: "
            + "; ".join(validate_mapping(workload, arch, next(enumerate_mappings(workload, arch)))))
    scored.sort(key=lambda mr: (mr[1].objective(objective), mr[0].key()))
    best = scored[0]
    return SearchResult(best[0], best[1], tuple(scored), size, exhaustive)
