"""Analytical access counting, energy and latency for one mapped layer.

Buffering rule shared with the loop-nest simulator: a buffer below a set of
loops refills whenever the index of any loop above it that addresses the
tensor changes. Walking the loops from the innermost outward, loops that do
not address the tensor are free until the first one that does; from there
on every loop multiplies the refill count.

Data paths: weights go DRAM -> W-Spad (bypassing the shared buffer), input
spikes DRAM -> GLB -> IF-Spad, membrane state lives in the Vmem-Spad and
spills to GLB/DRAM only when its tile is displaced. Output spikes are written
to GLB and drained to DRAM. Sparse formats change the bits moved, never the
element (word) counts of dense transfers.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace
from math import prod

from ..formats import Format, size_bits, FormatParams
from .spec import DIMS, PE_LEVELS, RELEVANT, ArchitectureSpec, Mapping, Workload

SKIPPING_FORMATS = (Format.UBM, Format.CP, Format.RLE)  # UOP stores zeros explicitly


class InvalidMappingError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class Access:
    level: str
    tensor: str
    op: str  # "read" | "write"
    words: float
    payload_bits: float
    metadata_bits: float = 0.0


@dataclass
class AccessCounts:
    accesses: list[Access] = field(default_factory=list)
    macs: int = 0
    acc_ops: float = 0.0       # accumulates issued
    acc_active: float = 0.0    # accumulates with both operands nonzero
    cmp_ops: float = 0.0
    pes_used: int = 1
    weight_bits: int = 8

    def words(self, level: str, tensor: str, op: str) -> float:
        return sum(a.words for a in self.accesses if (a.level, a.tensor, a.op) == (level, tensor, op))

    def table(self) -> dict[tuple[str, str, str], float]:
        out: dict = {}
        for a in self.accesses:
            key = (a.level, a.tensor, a.op)
            out[key] = out.get(key, 0.0) + a.words
        return out

    def level_bits(self, level: str) -> float:
        return sum(a.payload_bits + a.metadata_bits for a in self.accesses if a.level == level)


BREAKDOWN_COLUMNS = ("dram", "glb", "wspad", "ifspad", "vmemspad", "vthreg",
                     "compute_acc", "compute_cmp", "metadata")
_LEVEL_COLUMN = {"DRAM": "dram", "GLB": "glb", "WSpad": "wspad", "IFSpad": "ifspad",
                 "VmemSpad": "vmemspad", "VthReg": "vthreg"}


@dataclass(frozen=True)
class EnergyReport:
    level_energy: dict
    metadata_energy: float
    compute_acc: float
    compute_cmp: float
    total: float
    cycles: float = 0.0
    accesses: tuple = ()

    @property
    def edp(self) -> float:
        return self.total * self.cycles

    def breakdown(self) -> dict[str, float]:
        row = {c: 0.0 for c in BREAKDOWN_COLUMNS}
        for level, e in self.level_energy.items():
            row[_LEVEL_COLUMN[level]] += e
        row["compute_acc"] = self.compute_acc
        row["compute_cmp"] = self.compute_cmp
        row["metadata"] = self.metadata_energy
        return row

    def objective(self, name: str) -> float:
        if name == "energy":
            return self.total
        if name == "edp":
            return self.edp
        raise ValueError(f"unknown objective {name!r}")

    def __add__(self, other: "EnergyReport") -> "EnergyReport":
        levels = {k: self.level_energy.get(k, 0.0) + other.level_energy.get(k, 0.0)
                  for k in {**self.level_energy, **other.level_energy}}
        rep = EnergyReport(levels, self.metadata_energy + other.metadata_energy,
                           self.compute_acc + other.compute_acc, self.compute_cmp + other.compute_cmp,
                           0.0, self.cycles + other.cycles, self.accesses + other.accesses)
        return replace(rep, total=math.fsum(rep.breakdown().values()))

    def to_dict(self) -> dict:
        return {"total": self.total, "cycles": self.cycles, "edp": self.edp,
                "breakdown": self.breakdown(),
                "accesses": [a.__dict__ for a in self.accesses]}


# -- loop-nest helpers -----------------------------------------------------------

def halo(outputs: int, kernel: int, stride: int) -> int:
    """Distinct input rows touched by ``outputs`` windows of ``kernel`` rows."""
    if outputs == 0 or kernel == 0:
        return 0
    if stride <= kernel:
        return (outputs - 1) * stride + kernel
    return outputs * kernel


def extents_below(mapping: Mapping, boundary: str) -> dict[str, int]:
    """Per-dim extent covered by the loops under ``boundary`` (GLB, ARRAY or PE)."""
    levels = {"GLB": ("GLB", "ROW", "COL", "PE"), "ARRAY": ("ROW", "COL", "PE"), "PE": ("PE",)}[boundary]
    return {d: prod(mapping.factor(lv, d) for lv in levels) for d in DIMS}


def tile_size(tensor: str, ext: dict[str, int], stride: int) -> int:
    if tensor == "W":
        return ext["M"] * ext["C"] * ext["R"] * ext["S"]
    if tensor == "I":
        return ext["T"] * ext["C"] * halo(ext["P"], ext["R"], stride) * halo(ext["Q"], ext["S"], stride)
    if tensor == "O":
        return ext["M"] * ext["P"] * ext["Q"]
    raise ValueError(tensor)


def refills(tensor: str, loops) -> int:
    relevant = RELEVANT[tensor]
    count, seen = 1, False
    for d, f in reversed(loops):
        seen = seen or d in relevant
        if seen:
            count *= f
    return count


# -- validation --------------------------------------------------------------------

def validate_mapping(workload: Workload, arch: ArchitectureSpec, mapping: Mapping) -> list[str]:
    """All constraint violations; an empty list means the mapping is legal."""
    v: list[str] = []
    for name in ("dram", "glb", "pe"):
        loops = getattr(mapping, name)
        dims = [d for d, _ in loops]
        if any(d not in DIMS for d in dims):
            v.append(f"structure: unknown dim in {name} loops {dims}")
        if len(set(dims)) != len(dims):
            v.append(f"structure: repeated dim in {name} loops {dims}")
        if any(f < 1 for _, f in loops):
            v.append(f"structure: non-positive factor in {name} loops")
    for name, sp, limit in (("row", mapping.row, arch.pe_rows), ("col", mapping.col, arch.pe_cols)):
        if sp is None:
            continue
        if sp[0] not in DIMS or sp[1] < 1:
            v.append(f"structure: bad spatial {name} assignment {sp}")
        elif sp[1] > limit:
            v.append(f"spatial: {name} factor {sp[1]} exceeds {limit} PEs")
    if mapping.row and mapping.col and mapping.row[0] == mapping.col[0]:
        v.append(f"spatial: dim {mapping.row[0]} assigned to both rows and columns")
    if v:
        return v
    for d in DIMS:
        got = prod(mapping.factor(lv, d) for lv in ("DRAM", "GLB", "ROW", "COL", "PE"))
        if got != workload.dims[d]:
            v.append(f"tiling: factors of {d} multiply to {got}, extent is {workload.dims[d]}")
    # causality: T is the outermost DRAM loop and is never tiled or spatial
    if any(d == "T" for d, _ in mapping.glb + mapping.pe):
        v.append("causality: time loop tiled below the outermost level")
    if any(sp is not None and sp[0] == "T" for sp in (mapping.row, mapping.col)):
        v.append("causality: time loop mapped spatially")
    t_pos = [i for i, (d, _) in enumerate(mapping.dram) if d == "T"]
    if t_pos and t_pos[0] != 0:
        v.append("causality: time loop reordered inside another DRAM loop")
    s = workload.stride
    pe_ext, glb_ext = extents_below(mapping, "PE"), extents_below(mapping, "GLB")
    need = {
        "WSpad": tile_size("W", pe_ext, s) * workload.weight_bits,
        "IFSpad": tile_size("I", pe_ext, s),
        "VmemSpad": tile_size("O", pe_ext, s) * arch.vmem_bits,
        "GLB": tile_size("I", glb_ext, s) + tile_size("O", glb_ext, s) * arch.vmem_bits,
    }
    for level, bits in need.items():
        cap = arch.levels[level].capacity_bits
        if bits > cap:
            v.append(f"capacity: {level} needs {bits} bits, holds {cap:g}")
    return v


# -- counting ------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def _bits(fmt: Format | None, n: float, density: float, value_bits: int, rle_bits: int
          ) -> tuple[float, float]:
    """(payload, metadata) bits for moving one ``n``-element tile."""
    if fmt is None or n == 0:
        return n * value_bits, 0.0
    meta, pay = size_bits(fmt, int(n), density * n, value_bits, FormatParams(rle_bits))
    return pay, meta


def access_counts(workload: Workload, arch: ArchitectureSpec, mapping: Mapping) -> AccessCounts:
    wl = workload
    if wl.macs == 0:
        return AccessCounts(weight_bits=wl.weight_bits)
    violations = validate_mapping(wl, arch, mapping)
    if violations:
        raise InvalidMappingError(violations)
    s, R = wl.stride, wl.rle_bits
    n_pe = mapping.pes_used
    above_dram = list(mapping.dram)
    above_array = list(mapping.dram) + list(mapping.glb)
    ext = {b: extents_below(mapping, b) for b in ("GLB", "ARRAY", "PE")}
    acc: list[Access] = []

    def add(level, tensor, op, words, fmt, n_tile, density, vb):
        transfers = words / n_tile if n_tile else 0.0
        pay, meta = _bits(fmt, n_tile, density, vb, R)
        acc.append(Access(level, tensor, op, words, pay * transfers, meta * transfers))

    dw, di, do = wl.weight_density, wl.input_density, wl.output_density
    wb = wl.weight_bits
    skip_in = di if arch.input_skipping else 1.0
    skip_w = dw if wl.weight_format in SKIPPING_FORMATS else 1.0

    # weights
    r_w = refills("W", above_array)
    t_arr, t_pe = tile_size("W", ext["ARRAY"], s), tile_size("W", ext["PE"], s)
    add("DRAM", "W", "read", t_arr * r_w, wl.weight_format, t_arr, dw, wb)
    add("WSpad", "W", "write", t_pe * r_w * n_pe, wl.weight_format, t_pe, dw, wb)
    w_reads = wl.macs * skip_in * skip_w
    meta_tile = _bits(wl.weight_format, t_pe, dw, wb, R)[1]
    words_per_pass = t_pe * skip_w
    meta_reads = w_reads * meta_tile / words_per_pass if words_per_pass else 0.0
    acc.append(Access("WSpad", "W", "read", w_reads, w_reads * wb, meta_reads))

    # input spikes
    r_dram, r_arr = refills("I", above_dram), refills("I", above_array)
    t_glb, t_arr, t_pe = (tile_size("I", ext[b], s) for b in ("GLB", "ARRAY", "PE"))
    add("DRAM", "I", "read", t_glb * r_dram, wl.input_format, t_glb, di, 1)
    add("GLB", "I", "write", t_glb * r_dram, wl.input_format, t_glb, di, 1)
    add("GLB", "I", "read", t_arr * r_arr, wl.input_format, t_arr, di, 1)
    add("IFSpad", "I", "write", t_pe * r_arr * n_pe, None, t_pe, di, 1)
    add("IFSpad", "I", "read", wl.macs, None, 1, di, 1)

    # membrane state
    vb = arch.vmem_bits
    neurons = wl.neurons
    passes = prod(f for _, f in above_array)
    t_glb, t_arr, t_pe = (tile_size("O", ext[b], s) for b in ("GLB", "ARRAY", "PE"))
    vmem = t_pe * passes * n_pe
    add("VmemSpad", "O", "read", vmem, None, 1, 1.0, vb)
    add("VmemSpad", "O", "write", vmem, None, 1, 1.0, vb)
    spill_arr = t_arr * refills("O", above_array) - neurons
    spill_dram = t_glb * refills("O", above_dram) - neurons
    add("GLB", "O", "read", spill_arr + spill_dram, None, 1, 1.0, vb)
    add("GLB", "O", "write", spill_arr + spill_dram, None, 1, 1.0, vb)
    add("DRAM", "O", "read", spill_dram, None, 1, 1.0, vb)
    add("DRAM", "O", "write", spill_dram, None, 1, 1.0, vb)

    # output spikes, one neuron-wide frame per timestep
    frames = wl.dims["T"] * neurons
    for level, op in (("GLB", "write"), ("GLB", "read"), ("DRAM", "write")):
        add(level, "S", op, frames, wl.output_format, neurons, do, 1)

    cmp_ops = float(frames)
    acc.append(Access("VthReg", "Vth", "read", cmp_ops, cmp_ops * arch.vth_bits))
    return AccessCounts(acc, wl.macs, wl.macs * skip_in * skip_w, wl.macs * di * dw, cmp_ops,
                        n_pe, wb)


def energy(counts: AccessCounts, arch: ArchitectureSpec) -> EnergyReport:
    """Sum per-bit access energies plus compute; metadata is its own line item."""
    level_parts: dict[str, list[float]] = {}
    meta_parts: list[float] = []
    for a in counts.accesses:
        lv = arch.levels[a.level]
        e = lv.read_energy if a.op == "read" else lv.write_energy
        level_parts.setdefault(a.level, []).append(a.payload_bits * e)
        meta_parts.append(a.metadata_bits * e)
    ops = counts.acc_active if arch.clock_gating else counts.acc_ops
    compute_acc = ops * arch.accumulate_energy * counts.weight_bits
    compute_cmp = counts.cmp_ops * arch.compare_energy
    level_energy = {k: math.fsum(v) for k, v in level_parts.items()}
    rep = EnergyReport(level_energy, math.fsum(meta_parts), compute_acc, compute_cmp, 0.0,
                       accesses=tuple(counts.accesses))
    return replace(rep, total=math.fsum(rep.breakdown().values()))


def latency_from_counts(counts: AccessCounts, arch: ArchitectureSpec) -> float:
    """Slowest of compute and every level's bits / bandwidth."""
    if counts.macs == 0:
        return 0.0
    stages = [counts.acc_ops / (counts.pes_used * arch.ops_per_cycle)]
    for name, lv in arch.levels.items():
        width = lv.bandwidth * (counts.pes_used if name in PE_LEVELS else 1)
        stages.append(counts.level_bits(name) / width)
    return max(stages)


def latency(workload: Workload, arch: ArchitectureSpec, mapping: Mapping) -> float:
    return latency_from_counts(access_counts(workload, arch, mapping), arch)


def evaluate(workload: Workload, arch: ArchitectureSpec, mapping: Mapping) -> EnergyReport:
    counts = access_counts(workload, arch, mapping)
    return replace(energy(counts, arch), cycles=latency_from_counts(counts, arch))
