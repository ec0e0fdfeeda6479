"""Accelerator configuration.

The config file is flat ``key = value`` text, one field per line, ``#`` starts a
comment. Every key must be a field of :class:`HwConfig`; missing keys keep the
default (the two-engine, 4 SU per engine, 32x16 EPE, 250/500 MHz design).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


def _pow2(x):
    return x >= 4 and x & (x - 1) == 0


@dataclass(frozen=True)
class HwConfig:
    num_engines: int = 2
    sus_per_engine: int = 4
    m: int = 32                       # EPE rows per SU (input channels per slice)
    n: int = 16                       # EPE columns per SU; 2n kernel groups
    f_epe: float = 500e6
    f_logic: float = 250e6
    weight_cache_depth: int = 16      # kernel slots per EPE weight bank
    ib_bytes: int = 4 << 20
    ob_bytes_per_component: int = 64 << 10
    bc_bytes: int = 64 << 10          # one BC set (per SU)
    ib_port_bits: int = 512
    assemble_port_bits: int = 512
    weight_port_bits: int = 512
    ddr_bandwidth: float = 19.2e9     # bytes/s

    def __post_init__(self):
        if self.f_epe != 2 * self.f_logic:
            raise ConfigError("f_epe must be twice f_logic (double-pumped EPEs)")
        if self.sus_per_engine < 1 or self.num_engines < 1:
            raise ConfigError("need at least one engine and one SU per engine")
        if not (_pow2(self.m) and _pow2(self.n)):
            raise ConfigError("m and n must be powers of two >= 4")
        if not 1 <= self.weight_cache_depth:
            raise ConfigError("weight_cache_depth must be >= 1")
        for name in ("ib_port_bits", "assemble_port_bits", "weight_port_bits"):
            if getattr(self, name) % 16:
                raise ConfigError(f"{name} must be a multiple of 16")

    @property
    def lanes(self) -> int:
        """Kernel groups per SU (2n); also the FPU SIMD width."""
        return 2 * self.n

    @property
    def dsps(self) -> int:
        return self.num_engines * self.sus_per_engine * self.m * self.n

    @property
    def ib_port_bytes(self) -> int:
        return self.ib_port_bits // 8

    @property
    def weight_port_bytes(self) -> int:
        return self.weight_port_bits // 8

    @property
    def assemble_port_bytes(self) -> int:
        return self.assemble_port_bits // 8

    def macs_per_logic_cycle(self) -> int:
        """Per engine, all SUs busy: two MACs per DSP per logic cycle."""
        return self.sus_per_engine * self.m * self.n * 2


DEFAULT_CONFIG = HwConfig()


def parse_hwconfig(text: str) -> HwConfig:
    known = {f.name: f.type for f in fields(HwConfig)}
    kw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            kw[key] = float(value) if known[key] == "float" else int(value, 0)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return HwConfig(**kw)


def emit_hwconfig(hw: HwConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in asdict(hw).items())


def load_hwconfig(path) -> HwConfig:
    with open(path) as f:
        return parse_hwconfig(f.read())
