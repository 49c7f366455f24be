"""Scenario configuration: typed spec, INI parsing, and default studies.

A scenario file is a single INI document with sections [source]
[implant] [grid] [materials] [exposure] [solver] [probes] [output].
Every key can be overridden on the command line with its dotted name
(e.g. ``--exposure.dt_s 60``).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError
from .field_source import UniformHarmonicField
from .fileio import read_coil, read_segments
from .geometry import Material, MaterialTable, ProbeBox, build_network

__all__ = [
    "ScenarioConfig", "load_config", "apply_overrides",
    "gel_phantom_config", "polystyrene_phantom_config", "mh_sanity_config",
]


@dataclass
class SourceSpec:
    kind: str = "uniform"                 # uniform | coil
    frequency_hz: float = 2000.0
    b_peak_t: float = 0.0035
    b_axis: str = "implant_normal"        # token or "x y z"
    gauge_origin_m: str = "implant_center"
    coil_file: str = ""
    coil_current_scale: float = 1.0


@dataclass
class ImplantSpec:
    segment_file: str = ""                # empty -> lattice tiler
    cell_pitch_m: float = 0.0015
    side_m: float = 0.093
    radius_m: float = 0.0003
    conductivity_s_m: float = 1.82e6
    center_m: str = "0.065 0.22 0.10"
    u_axis: str = "0.70710678118654752 0.70710678118654752 0"
    v_axis: str = "0 0 1"
    merge_tol_m: float = 1e-6
    thermal_conductivity: float = 17.0
    density: float = 4510.0
    heat_capacity: float = 523.0


@dataclass
class GridSpec:
    origin_m: str = "0 0 0"
    spacing_m: float = 0.002
    dims: str = "65 220 100"
    fill_material: int = 1


@dataclass
class ExposureSpec:
    duration_s: float = 900.0
    dt_s: float = 1.0


@dataclass
class SolverSpec:
    tol_outer: float = 1e-6
    tol_inner: float = 1e-7
    seed_rtol: float = 1e-7
    h1d_m: float = 0.0                    # 0 -> half mean segment length
    coarsening: int = 2
    maxit_outer: int = 400
    h_amb: float = 0.0
    outer_preconditioner: str = "kkt"     # kkt | mass


@dataclass
class OutputSpec:
    dir: str = "out"
    snapshot_every: int = 0


@dataclass
class ScenarioConfig:
    source: SourceSpec = dc_field(default_factory=SourceSpec)
    implant: ImplantSpec = dc_field(default_factory=ImplantSpec)
    grid: GridSpec = dc_field(default_factory=GridSpec)
    exposure: ExposureSpec = dc_field(default_factory=ExposureSpec)
    solver: SolverSpec = dc_field(default_factory=SolverSpec)
    output: OutputSpec = dc_field(default_factory=OutputSpec)
    materials: dict[int, Material] = dc_field(default_factory=dict)
    probes: list[tuple[str, ProbeBox]] = dc_field(default_factory=list)

    # ---- resolved geometry helpers -------------------------------------

    def implant_frame(self):
        """(center, u, v, normal) of the implant plane, unit vectors."""
        center = _vec3(self.implant.center_m, "implant.center_m")
        u = _vec3(self.implant.u_axis, "implant.u_axis")
        v = _vec3(self.implant.v_axis, "implant.v_axis")
        u = u / np.linalg.norm(u)
        v = v - u * (u @ v)
        v = v / np.linalg.norm(v)
        n = np.cross(u, v)
        return center, u, v, n

    def build_network(self):
        from .scenarios import elementary_cell, tile_cranial_mesh, place_segments

        imp = self.implant
        if imp.segment_file:
            if not os.path.exists(imp.segment_file):
                raise ConfigError(f"segment file not found: {imp.segment_file}")
            segs = read_segments(imp.segment_file)
        else:
            cell = elementary_cell(imp.cell_pitch_m)
            flat = tile_cranial_mesh(cell, imp.side_m)
            center, u, v, _ = self.implant_frame()
            segs = place_segments(flat, center, u, v)
        return build_network(segs, imp.radius_m, imp.conductivity_s_m,
                             merge_tol=imp.merge_tol_m)

    def build_source(self):
        src = self.source
        if src.kind == "uniform":
            center, _, _, n = self.implant_frame()
            if src.b_axis.strip() == "implant_normal":
                axis = n
            else:
                axis = _vec3(src.b_axis, "source.b_axis")
                axis = axis / np.linalg.norm(axis)
            if src.gauge_origin_m.strip() == "implant_center":
                origin = center
            else:
                origin = _vec3(src.gauge_origin_m, "source.gauge_origin_m")
            return UniformHarmonicField(b_peak=src.b_peak_t * axis.astype(complex),
                                        frequency=src.frequency_hz,
                                        gauge_origin=origin)
        if src.kind == "coil":
            if not src.coil_file:
                raise ConfigError("source.kind=coil requires source.coil_file")
            if not os.path.exists(src.coil_file):
                raise ConfigError(f"coil file not found: {src.coil_file}")
            coil = read_coil(src.coil_file, src.frequency_hz)
            if src.coil_current_scale != 1.0:
                coil = coil.scaled(src.coil_current_scale)
            return coil
        raise ConfigError(f"unknown source.kind {src.kind!r}")

    def build_grid(self):
        from .geometry import VoxelGrid

        g = self.grid
        dims = tuple(int(x) for x in g.dims.split())
        if len(dims) != 3:
            raise ConfigError(f"grid.dims needs 3 integers, got {g.dims!r}")
        material = np.full(dims, g.fill_material, dtype=np.int32)
        return VoxelGrid(origin=_vec3(g.origin_m, "grid.origin_m"),
                         spacing=g.spacing_m, dims=dims, material=material)

    def material_table(self) -> MaterialTable:
        if not self.materials:
            raise ConfigError("no materials defined")
        table = MaterialTable(self.materials)
        if self.grid.fill_material not in table:
            raise ConfigError(f"grid.fill_material {self.grid.fill_material} not in materials")
        return table

    def implant_material(self) -> Material:
        imp = self.implant
        return Material(name="implant", conductivity=imp.thermal_conductivity,
                        density=imp.density, heat_capacity=imp.heat_capacity)

    def h1d(self, network) -> float:
        return self.solver.h1d_m if self.solver.h1d_m > 0 else \
            0.5 * float(network.lengths.mean())

    def validate(self):
        if self.exposure.duration_s <= 0 or self.exposure.dt_s <= 0:
            raise ConfigError("exposure duration and dt must be positive")
        self.material_table()
        return self


_SECTIONS = {
    "source": SourceSpec, "implant": ImplantSpec, "grid": GridSpec,
    "exposure": ExposureSpec, "solver": SolverSpec, "output": OutputSpec,
}


def _vec3(text: str, label: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in str(text).split()])
    except ValueError:
        raise ConfigError(f"{label}: expected 3 numbers, got {text!r}") from None
    if v.shape != (3,):
        raise ConfigError(f"{label}: expected 3 numbers, got {text!r}")
    return v


def _coerce(current, text: str):
    kind = type(current)
    try:
        if kind is bool:
            return text.strip().lower() in ("1", "true", "yes", "on")
        return kind(text) if kind is not str else text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__}") from None


def load_config(path: str, overrides: list[str] | None = None) -> ScenarioConfig:
    """Load an INI scenario file and apply dotted-name overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser.read(path)
    cfg = ScenarioConfig()
    for section, spec_cls in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        spec = getattr(cfg, section)
        for key, value in parser.items(section):
            if not hasattr(spec, key):
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(spec, key, _coerce(getattr(spec, key), value))
    if parser.has_section("materials"):
        for key, value in parser.items("materials"):
            if not key.startswith("mat."):
                raise ConfigError(f"[materials] keys look like mat.<id>, got {key}")
            mat_id = int(key.split(".", 1)[1])
            parts = value.split()
            if len(parts) != 5:
                raise ConfigError(f"[materials] {key}: need 'name lambda rho cp hb'")
            cfg.materials[mat_id] = Material(
                name=parts[0], conductivity=float(parts[1]), density=float(parts[2]),
                heat_capacity=float(parts[3]), perfusion=float(parts[4]))
    if parser.has_section("probes"):
        for key, value in parser.items("probes"):
            parts = value.split()
            if len(parts) != 7:
                raise ConfigError(f"[probes] {key}: need 'name cx cy cz hx hy hz'")
            box = ProbeBox(center=[float(x) for x in parts[1:4]],
                           half_extents=[float(x) for x in parts[4:7]])
            cfg.probes.append((parts[0], box))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_overrides(cfg: ScenarioConfig, overrides: list[str]) -> ScenarioConfig:
    """Apply 'section.key=value' strings on top of a config."""
    for item in overrides:
        name, _, value = item.partition("=")
        if not _:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        section, _, key = name.strip().partition(".")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"unknown override target {name!r}")
        spec = getattr(cfg, section)
        if not hasattr(spec, key):
            raise ConfigError(f"unknown key [{section}] {key}")
        setattr(spec, key, _coerce(getattr(spec, key), value.strip()))
    return cfg


# ---- default studies ----------------------------------------------------

GEL = Material("gel", 0.624, 1006.0, 4200.0, 0.0)
POLYSTYRENE = Material("polystyrene", 0.035, 20.0, 1200.0, 0.0)
TISSUE = Material("tissue", 0.5, 1050.0, 3600.0, 2400.0)


def _phantom_probes(cfg: ScenarioConfig) -> list[tuple[str, ProbeBox]]:
    """Probe boxes 3 x 2 x 1 mm next to the implant plane.

    Two peripheral probes sit near edge midpoints of the square mesh
    (6.5 mm inside the rim) and one at the centre, all offset 2 mm along
    the plane normal.
    """
    center, u, v, n = cfg.implant_frame()
    half = np.array([1.5e-3, 1.0e-3, 0.5e-3])
    offset = 2e-3 * n
    hs = cfg.implant.side_m / 2.0
    spots = [
        ("peripheral_1", center + (hs - 6.5e-3) * v + offset),
        ("peripheral_2", center + (hs - 6.5e-3) * u + offset),
        ("center", center + offset),
    ]
    return [(name, ProbeBox(center=pos, half_extents=half)) for name, pos in spots]


def gel_phantom_config(cropped: bool = False) -> ScenarioConfig:
    """Cranial-mesh plate in the gel-filled container, uniform-field source.

    `cropped=True` shrinks the container to the region the 900 s thermal
    front can reach (same margins as the narrow container axis), which
    leaves probe readings unchanged but fits small machines.
    """
    cfg = ScenarioConfig()
    cfg.materials[1] = GEL
    if cropped:
        cfg.grid.dims = "65 65 79"
        cfg.grid.spacing_m = 0.002
        cfg.implant.center_m = "0.065 0.065 0.079"
    else:
        cfg.grid.dims = "65 220 100"
        cfg.implant.center_m = "0.065 0.22 0.10"
    cfg.probes = _phantom_probes(cfg)
    return cfg.validate()


def polystyrene_phantom_config(cropped: bool = False) -> ScenarioConfig:
    cfg = gel_phantom_config(cropped=cropped)
    cfg.materials[1] = POLYSTYRENE
    return cfg.validate()


def mh_sanity_config(workdir: str = ".") -> ScenarioConfig:
    """Synthetic curved-strip implant plus collar coil at 100 kHz.

    Not a reproduction of any measured geometry: a ladder strip bent on a
    55 mm cylinder inside a perfused tissue block, with a three-loop
    collar coil scaled so the peak field at the implant is 16 mT.
    """
    from .scenarios import collar_coil_file, curved_strip_file

    cfg = ScenarioConfig()
    cfg.materials[1] = TISSUE
    cfg.source.kind = "coil"
    cfg.source.frequency_hz = 1e5
    cfg.source.coil_file = collar_coil_file(workdir)
    cfg.implant.segment_file = curved_strip_file(workdir)
    cfg.grid.origin_m = "-0.056 -0.016 -0.056"
    cfg.grid.spacing_m = 0.002
    cfg.grid.dims = "56 40 56"
    cfg.exposure.duration_s = 180.0
    cfg.exposure.dt_s = 30.0
    cfg.probes = [("apex", ProbeBox(center=[0.057, 0.02, 0.0],
                                    half_extents=[1.5e-3, 1.0e-3, 0.5e-3]))]
    return cfg
