"""Architecture, workload and mapping descriptions for the Eyeriss-like cost model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import prod
from typing import Mapping as TMapping

from ..formats import Format

DIMS = ("T", "M", "C", "P", "Q", "R", "S")
TEMPORAL_LEVELS = ("DRAM", "GLB", "PE")
STORAGE_LEVELS = ("DRAM", "GLB", "WSpad", "IFSpad", "VmemSpad", "VthReg")
PE_LEVELS = ("WSpad", "IFSpad", "VmemSpad", "VthReg")

# tensor -> dims that index it
RELEVANT = {
    "W": frozenset("MCRS"),
    "I": frozenset("TCPQRS"),
    "O": frozenset("MPQ"),  # membrane state persists across timesteps
}


@dataclass(frozen=True)
class MemoryLevel:
    """Per-bit access energies (model units), capacity and bandwidth in bits."""

    name: str
    capacity_bits: float
    read_energy: float
    write_energy: float
    bandwidth: float  # bits per cycle; per PE for PE-local levels

    def __post_init__(self):
        if not self.capacity_bits > 0:
            raise ValueError(f"{self.name}: capacity must be positive")
        if self.read_energy < 0 or self.write_energy < 0:
            raise ValueError(f"{self.name}: energies must be non-negative")
        if not self.bandwidth > 0:
            raise ValueError(f"{self.name}: bandwidth must be positive")


def _default_levels() -> dict[str, MemoryLevel]:
    # Illustrative relative magnitudes only: DRAM >> buffer >> scratchpad >> compute.
    return {
        "DRAM": MemoryLevel("DRAM", float("inf"), 200.0, 200.0, 64.0),
        "GLB": MemoryLevel("GLB", 108 * 1024 * 8, 6.0, 6.0, 256.0),
        "WSpad": MemoryLevel("WSpad", 224 * 16, 1.0, 1.0, 16.0),
        "IFSpad": MemoryLevel("IFSpad", 64, 0.5, 0.5, 16.0),
        "VmemSpad": MemoryLevel("VmemSpad", 24 * 16, 1.0, 1.0, 32.0),
        "VthReg": MemoryLevel("VthReg", 16, 0.1, 0.1, 16.0),
    }


@dataclass(frozen=True)
class ArchitectureSpec:
    levels: TMapping[str, MemoryLevel] = field(default_factory=_default_levels)
    pe_rows: int = 12
    pe_cols: int = 14
    accumulate_energy: float = 0.05  # per op per bit of weight width
    compare_energy: float = 0.5      # per CMP op
    vmem_bits: int = 16
    vth_bits: int = 16
    ops_per_cycle: int = 1           # accumulates per PE per cycle
    clock_gating: bool = True
    input_skipping: bool = True

    def __post_init__(self):
        missing = [name for name in STORAGE_LEVELS if name not in self.levels]
        if missing:
            raise ValueError(f"architecture is missing levels {missing}")
        if self.pe_rows < 1 or self.pe_cols < 1:
            raise ValueError("PE grid must be at least 1x1")
        if self.accumulate_energy < 0 or self.compare_energy < 0:
            raise ValueError("compute energies must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        data = dict(data)
        levels = _default_levels()
        for name, cfg in (data.pop("levels", None) or {}).items():
            if name not in levels:
                raise ValueError(f"unknown memory level {name!r}")
            base = levels[name]
            cap = cfg.get("capacity_bits", base.capacity_bits)
            levels[name] = MemoryLevel(
                name,
                float("inf") if cap in (None, "inf") else float(cap),
                float(cfg.get("read_energy", base.read_energy)),
                float(cfg.get("write_energy", base.write_energy)),
                float(cfg.get("bandwidth", base.bandwidth)),
            )
        return cls(levels=levels, **data)

    def to_dict(self) -> dict:
        return {
            "levels": {name: {"capacity_bits": lv.capacity_bits if lv.capacity_bits != float("inf") else "inf",
                              "read_energy": lv.read_energy, "write_energy": lv.write_energy,
                              "bandwidth": lv.bandwidth}
                       for name, lv in self.levels.items()},
            "pe_rows": self.pe_rows, "pe_cols": self.pe_cols,
            "accumulate_energy": self.accumulate_energy, "compare_energy": self.compare_energy,
            "vmem_bits": self.vmem_bits, "vth_bits": self.vth_bits, "ops_per_cycle": self.ops_per_cycle,
            "clock_gating": self.clock_gating, "input_skipping": self.input_skipping,
        }


@dataclass(frozen=True)
class Workload:
    """One convolution-shaped spiking layer; dense layers use P=Q=R=S=1.

    ``*_format`` is ``None`` for dense storage or a sparse ``Format``.
    """

    dims: TMapping[str, int]
    stride: int = 1
    weight_bits: int = 8
    weight_density: float = 1.0
    input_density: float = 1.0
    output_density: float = 1.0
    weight_format: Format | None = None
    input_format: Format | None = None
    output_format: Format | None = None
    rle_bits: int = 4
    name: str = "layer"

    def __post_init__(self):
        dims = {d: int(self.dims.get(d, 1)) for d in DIMS}
        extra = set(self.dims) - set(DIMS)
        if extra:
            raise ValueError(f"unknown workload dims {sorted(extra)}")
        if any(v < 0 for v in dims.values()):
            raise ValueError("workload dims must be non-negative")
        object.__setattr__(self, "dims", dims)
        for name in ("weight_density", "input_density", "output_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("weight_format", "input_format", "output_format"):
            val = getattr(self, name)
            if val is not None and val != "dense":
                object.__setattr__(self, name, Format.parse(val))
            elif val == "dense":
                object.__setattr__(self, name, None)

    @property
    def macs(self) -> int:
        return prod(self.dims.values())

    @property
    def neurons(self) -> int:
        d = self.dims
        return d["M"] * d["P"] * d["Q"]

    @property
    def input_extent(self) -> tuple[int, int]:
        d, s = self.dims, self.stride
        return (d["P"] - 1) * s + d["R"], (d["Q"] - 1) * s + d["S"]

    def with_(self, **changes) -> "Workload":
        return replace(self, **changes)

    @classmethod
    def conv(cls, T, M, C, P, Q, R, S, stride=1, **kw) -> "Workload":
        return cls(dict(T=T, M=M, C=C, P=P, Q=Q, R=R, S=S), stride=stride, **kw)

    @classmethod
    def dense(cls, T, M, C, **kw) -> "Workload":
        return cls(dict(T=T, M=M, C=C), **kw)


Loop = tuple[str, int]


@dataclass(frozen=True)
class Mapping:
    """Tiled loop nest: DRAM loops, buffer loops, spatial rows/cols, PE loops.

    Each temporal level lists ``(dim, factor)`` from outer to inner; factor-1
    loops are omitted. ``row``/``col`` place one dimension each on the PE grid.
    """

    dram: tuple[Loop, ...] = ()
    glb: tuple[Loop, ...] = ()
    pe: tuple[Loop, ...] = ()
    row: Loop | None = None
    col: Loop | None = None

    def __post_init__(self):
        for name in ("dram", "glb", "pe"):
            loops = ((str(d), int(f)) for d, f in getattr(self, name))
            object.__setattr__(self, name, tuple(lp for lp in loops if lp[1] != 1))
        for name in ("row", "col"):
            v = getattr(self, name)
            if v is not None:
                v = (str(v[0]), int(v[1]))
                object.__setattr__(self, name, None if v[1] == 1 else v)

    def level(self, name: str) -> tuple[Loop, ...]:
        return {"DRAM": self.dram, "GLB": self.glb, "PE": self.pe}[name]

    def factor(self, level: str, dim: str) -> int:
        if level in ("ROW", "COL"):
            sp = self.row if level == "ROW" else self.col
            return sp[1] if sp is not None and sp[0] == dim else 1
        return prod(f for d, f in self.level(level) if d == dim)

    @property
    def pes_used(self) -> int:
        return (self.row[1] if self.row else 1) * (self.col[1] if self.col else 1)

    def key(self) -> tuple:
        """Canonical encoding used for deterministic tie-breaks (dim order T,M,C,P,Q,R,S)."""
        def enc(loops):
            return tuple((DIMS.index(d), f) for d, f in loops)

        def sp(v):
            return (-1, 0) if v is None else (DIMS.index(v[0]), v[1])

        return (enc(self.dram), enc(self.glb), sp(self.row), sp(self.col), enc(self.pe))

    def to_dict(self) -> dict:
        return {"dram": [list(x) for x in self.dram], "glb": [list(x) for x in self.glb],
                "row": list(self.row) if self.row else None, "col": list(self.col) if self.col else None,
                "pe": [list(x) for x in self.pe]}

    @classmethod
    def from_dict(cls, data: dict) -> "Mapping":
        return cls(dram=tuple(map(tuple, data.get("dram", ()))), glb=tuple(map(tuple, data.get("glb", ()))),
                   pe=tuple(map(tuple, data.get("pe", ()))),
                   row=tuple(data["row"]) if data.get("row") else None,
                   col=tuple(data["col"]) if data.get("col") else None)

    def describe(self) -> str:
        def fmt(loops):
            return " ".join(f"{d}{f}" for d, f in loops) or "-"
        sp = " ".join(f"{n}:{v[0]}{v[1]}" for n, v in (("row", self.row), ("col", self.col)) if v) or "-"
        return f"DRAM[{fmt(self.dram)}] GLB[{fmt(self.glb)}] spatial[{sp}] PE[{fmt(self.pe)}]"
