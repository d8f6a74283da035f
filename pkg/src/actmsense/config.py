"""Highway configuration: fundamental diagram, topology, ramp parameters.

Configuration files are INI-style text with four sections::

    [diagram]
    v_f = 28.8889
    w_c = 6.6667
    rho_c = 0.0249
    rho_m = 0.1333

    [topology]
    pattern = standard      ; or give N, onramps, offramps explicitly
    N = 13

    [ramps]
    beta = 0.2             ; scalar applies to every off-ramp
    xi = 3:3.3, 6:3.3      ; or an explicit segment:value map

    [discretization]
    l = 400
    T = 1

All quantities are SI (m, s, veh/m, veh/s). Segment indices are 1-based,
matching the usual highway numbering.
"""

from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np


class ConfigError(ValueError):
    """Invalid highway configuration."""


class TopologyTooSmallError(ConfigError):
    pass


@dataclass(frozen=True)
class FundamentalDiagram:
    """Triangular fundamental diagram.

    Attributes:
        v_f: free-flow speed [m/s]
        w_c: congestion wave speed [m/s]
        rho_c: critical density [veh/m]
        rho_m: jam density [veh/m]
    """

    v_f: float
    w_c: float
    rho_c: float
    rho_m: float

    def __post_init__(self):
        if not (self.v_f > 0 and self.w_c > 0):
            raise ConfigError("v_f and w_c must be positive")
        if not (0 < self.rho_c < self.rho_m):
            raise ConfigError("need 0 < rho_c < rho_m")
        cap = self.v_f * self.rho_c
        mismatch = abs(cap - self.w_c * (self.rho_m - self.rho_c)) / cap
        if mismatch > 0.05:
            warnings.warn(
                f"fundamental diagram is not continuous at rho_c "
                f"(relative mismatch {mismatch:.3f})",
                stacklevel=3,
            )

    @property
    def capacity(self) -> float:
        """Maximum flow v_f * rho_c [veh/s]."""
        return self.v_f * self.rho_c

    def flux(self, rho):
        rho = np.asarray(rho, dtype=float)
        return np.minimum(self.v_f * rho, self.w_c * (self.rho_m - rho))


@dataclass(frozen=True)
class HighwayTopology:
    """Stretched highway with ``N`` mainline segments and attached ramps.

    State ordering is ``[rho_1..rho_N | on-ramp cells | off-ramp cells]``
    with ramp cells listed in increasing segment order. Input ordering is
    ``[f_in, f_out, on-ramp demands, off-ramp supplies]``.
    """

    N: int
    onramps: tuple[int, ...]
    offramps: tuple[int, ...]
    l: float
    T: float

    def __post_init__(self):
        object.__setattr__(self, "onramps", tuple(sorted(int(i) for i in self.onramps)))
        object.__setattr__(self, "offramps", tuple(sorted(int(i) for i in self.offramps)))
        if self.N < 2:
            raise TopologyTooSmallError("need at least two mainline segments")
        if self.l <= 0 or self.T <= 0:
            raise ConfigError("l and T must be positive")
        ramps = self.onramps + self.offramps
        if len(set(self.onramps)) != len(self.onramps) or len(set(self.offramps)) != len(self.offramps):
            raise ConfigError("duplicate ramp segment")
        if set(self.onramps) & set(self.offramps):
            raise ConfigError("a segment cannot carry both an on-ramp and an off-ramp")
        for i in ramps:
            if not 1 < i < self.N:
                raise ConfigError(f"ramp at segment {i}: first and last segments must be plain")

    @property
    def N_I(self) -> int:
        return len(self.onramps)

    @property
    def N_O(self) -> int:
        return len(self.offramps)

    @property
    def n(self) -> int:
        """State dimension."""
        return self.N + self.N_I + self.N_O

    @property
    def m(self) -> int:
        """Input dimension."""
        return 2 + self.N_I + self.N_O

    def kind(self, i: int) -> str:
        """'plain', 'on' or 'off' for 1-based mainline segment ``i``."""
        if i in self.onramps:
            return "on"
        if i in self.offramps:
            return "off"
        return "plain"

    # 0-based state/input indices
    def onramp_state(self, i: int) -> int:
        return self.N + self.onramps.index(i)

    def offramp_state(self, i: int) -> int:
        return self.N + self.N_I + self.offramps.index(i)

    def onramp_input(self, i: int) -> int:
        return 2 + self.onramps.index(i)

    def offramp_input(self, i: int) -> int:
        return 2 + self.N_I + self.offramps.index(i)

    def state_labels(self) -> list[str]:
        return (
            [f"rho_{i}" for i in range(1, self.N + 1)]
            + [f"rhohat_{i}" for i in self.onramps]
            + [f"rhochk_{i}" for i in self.offramps]
        )


def generate_standard_topology(N: int, l: float = 400.0, T: float = 1.0) -> HighwayTopology:
    """Repeating plain / on-ramp / off-ramp pattern with plain end segments.

    >>> t = generate_standard_topology(7)
    >>> t.onramps, t.offramps
    ((2, 5), (3, 6))
    """
    if N < 4:
        raise TopologyTooSmallError(f"standard pattern needs N >= 4, got {N}")
    inner = range(2, N)
    on = tuple(i for i in inner if i % 3 == 2)
    off = tuple(i for i in inner if i % 3 == 0)
    return HighwayTopology(N=N, onramps=on, offramps=off, l=l, T=T)


@dataclass(frozen=True)
class RampParams:
    """Off-ramp split ratios ``beta`` and on-ramp allocation parameters ``xi``."""

    beta: Mapping[int, float] = field(default_factory=dict)
    xi: Mapping[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class HighwayConfig:
    diagram: FundamentalDiagram
    topology: HighwayTopology
    ramps: RampParams

    def __post_init__(self):
        d, t, r = self.diagram, self.topology, self.ramps
        cfl = d.v_f * t.T / t.l
        if cfl > 1 + 1e-12:
            raise ConfigError(f"CFL condition violated: v_f*T/l = {cfl:.4f} > 1")
        if set(r.beta) != set(t.offramps):
            raise ConfigError("beta must be given for exactly the off-ramp segments")
        if set(r.xi) != set(t.onramps):
            raise ConfigError("xi must be given for exactly the on-ramp segments")
        for i, b in r.beta.items():
            if not 0 < b < 1:
                raise ConfigError(f"beta_{i} = {b} must lie strictly in (0, 1)")
        for i, x in r.xi.items():
            if not 0 < x <= d.w_c:
                raise ConfigError(f"xi_{i} = {x} must lie in (0, w_c]")

    @property
    def n(self) -> int:
        return self.topology.n

    @property
    def m(self) -> int:
        return self.topology.m

    def beta(self, i: int) -> float:
        return float(self.ramps.beta[i])

    def xi(self, i: int) -> float:
        return float(self.ramps.xi[i])

    def input_bounds(self) -> tuple[float, float]:
        return 0.0, self.diagram.capacity

    def state_bounds(self) -> tuple[float, float]:
        return 0.0, self.diagram.rho_m

    def with_length(self, l: float) -> "HighwayConfig":
        t = self.topology
        topo = HighwayTopology(N=t.N, onramps=t.onramps, offramps=t.offramps, l=l, T=t.T)
        return HighwayConfig(self.diagram, topo, self.ramps)


CASE_STUDY_DIAGRAM = dict(v_f=28.8889, w_c=6.6667, rho_c=0.0249, rho_m=0.1333)


def standard_highway(N: int, beta: float = 0.2, xi_ratio: float = 0.5,
                  l: float = 400.0, T: float = 1.0) -> HighwayConfig:
    """Standard-pattern highway with the case-study diagram parameters."""
    diagram = FundamentalDiagram(**CASE_STUDY_DIAGRAM)
    topo = generate_standard_topology(N, l=l, T=T)
    ramps = RampParams(
        beta={i: beta for i in topo.offramps},
        xi={i: xi_ratio * diagram.w_c for i in topo.onramps},
    )
    return HighwayConfig(diagram, topo, ramps)


def highway_a(**kw) -> HighwayConfig:
    """13 mainline segments, 4 on-ramps, 4 off-ramps (n = 21)."""
    return standard_highway(13, **kw)


def highway_b(**kw) -> HighwayConfig:
    """40 mainline segments, 13 on-ramps, 13 off-ramps (n = 66)."""
    return standard_highway(40, **kw)


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip().strip("[]")
    if not text:
        return ()
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _parse_map(text: str, keys: tuple[int, ...]) -> dict[int, float]:
    text = text.strip().strip("{}")
    if ":" not in text:
        return {k: float(text) for k in keys}
    out = {}
    for item in text.split(","):
        if item.strip():
            k, v = item.split(":")
            out[int(k)] = float(v)
    return out


def load_config(path: str | Path) -> HighwayConfig:
    """Parse an INI-style highway configuration file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return config_from_parser(cp)


def loads_config(text: str) -> HighwayConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read_string(text)
    return config_from_parser(cp)


def config_from_parser(cp: configparser.ConfigParser) -> HighwayConfig:
    try:
        dg = cp["diagram"]
        diagram = FundamentalDiagram(
            v_f=dg.getfloat("v_f"), w_c=dg.getfloat("w_c"),
            rho_c=dg.getfloat("rho_c"), rho_m=dg.getfloat("rho_m"),
        )
        disc = cp["discretization"]
        l, T = disc.getfloat("l"), disc.getfloat("T")
        tp = cp["topology"]
        N = tp.getint("N")
        if tp.get("pattern", "").strip().strip('"').lower() == "standard":
            topo = generate_standard_topology(N, l=l, T=T)
        else:
            topo = HighwayTopology(
                N=N,
                onramps=_parse_int_list(tp.get("onramps", "")),
                offramps=_parse_int_list(tp.get("offramps", "")),
                l=l, T=T,
            )
        rp = cp["ramps"] if cp.has_section("ramps") else {}
        beta = _parse_map(rp.get("beta", "0.2"), topo.offramps) if topo.offramps else {}
        xi_text = rp.get("xi", str(0.5 * diagram.w_c))
        xi = _parse_map(xi_text, topo.onramps) if topo.onramps else {}
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return HighwayConfig(diagram, topo, RampParams(beta=beta, xi=xi))


def dumps_config(cfg: HighwayConfig) -> str:
    d, t, r = cfg.diagram, cfg.topology, cfg.ramps
    fmt_map = lambda m: ", ".join(f"{k}:{v!r}" for k, v in sorted(m.items()))
    return (
        "[diagram]\n"
        f"v_f = {d.v_f!r}\nw_c = {d.w_c!r}\nrho_c = {d.rho_c!r}\nrho_m = {d.rho_m!r}\n\n"
        "[topology]\n"
        f"N = {t.N}\nonramps = {', '.join(map(str, t.onramps))}\n"
        f"offramps = {', '.join(map(str, t.offramps))}\n\n"
        "[ramps]\n"
        f"beta = {fmt_map(r.beta)}\nxi = {fmt_map(r.xi)}\n\n"
        "[discretization]\n"
        f"l = {t.l!r}\nT = {t.T!r}\n"
    )
