"""Line-based job configuration.

The format is ``key = value`` lines grouped under ``[section]`` headers;
``#`` starts a comment. Lists are comma separated and numeric lists also
accept a ``start:stop:step`` range (stop excluded). A file with a
``[polar]`` section describes a :class:`PolarJob`, anything else a
:class:`SimJob`; an empty file is the default single-edge-notched job.

Sections of a SimJob and their keys (defaults in the dataclasses below):

``geometry``
    width, height, notch_length (mm), nx, ny (divisions), thickness (mm)
``material``
    any :class:`~anisofrac.material.MaterialParams` field except Gc, l0, kB
``environment``
    theta (K), w_w (moisture mass fraction)
``fibers`` and ``fibers.<region>``
    distribution (random, aligned, balanced, list), vf (total volume
    fraction), angle, angles, weights, count, seed; regions add y_min, y_max
``fracture``
    Gc (N/mm), l0 (mm), alpha_hat, k
``loading``
    rate (mm/min), du (mm), target (mm), stop_fraction
``solver``
    tol_u, max_newton, staggered_passes, tol_stag, max_bisections,
    local_tol, local_max_iters, fd_eps, threads (0 keeps the default)
``output``
    directory, vtk_stride (0 disables snapshots), csv (file name)

A PolarJob uses ``polar`` (stretch, angles, times, angle, samples) with the
material, environment, fibers, solver and output sections.
"""

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..errors import AnisofracError, ConfigError
from ..fem import LoadProgram, SolverControls
from ..material import EnvState, MaterialParams
from ..orientation import FiberSpec, build_orientation, decompose_families
from ..phasefield import FractureParams


@dataclass(frozen=True)
class Geometry:
    width: float = 1.0
    height: float = 1.0
    notch_length: float = 0.5
    nx: int = 100
    ny: int = 100
    thickness: float = 1.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0 and self.thickness > 0):
            raise ConfigError("width, height and thickness must be positive", key="width")
        if self.nx < 4 or self.ny < 4:
            raise ConfigError("need at least 4 divisions in each direction", key="nx")
        if not 0.0 <= self.notch_length < self.width:
            raise ConfigError("notch_length must lie in [0, width)", key="notch_length")


DISTRIBUTIONS = ("random", "aligned", "balanced", "list")


@dataclass(frozen=True)
class FiberBlock:
    """Fiber population of one region; the unnamed block covers the whole specimen."""

    name: str = ""
    distribution: str = "random"
    vf: float = 0.5
    angle: float = 0.0
    angles: tuple = (45.0, -45.0)
    weights: tuple = (0.5, 0.5)
    count: int = 1000
    seed: int = 0
    y_min: float = -math.inf
    y_max: float = math.inf

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"distribution must be one of {', '.join(DISTRIBUTIONS)}",
                              key="distribution")
        if not 0.0 <= self.vf < 1.0:
            raise ConfigError("vf must lie in [0, 1)", key="vf")
        if self.distribution == "balanced" and len(self.angles) != 2:
            raise ConfigError("balanced distribution needs exactly two angles", key="angles")
        if self.count < 1:
            raise ConfigError("count must be positive", key="count")
        if not self.y_min < self.y_max:
            raise ConfigError("y_min must be below y_max", key="y_min")

    def spec(self):
        if self.distribution == "aligned":
            return FiberSpec.aligned(self.angle)
        if self.distribution == "random":
            return FiberSpec.random2d(self.count, self.seed)
        try:
            return FiberSpec(self.angles, self.weights)
        except AnisofracError as exc:
            raise ConfigError(str(exc), key="weights") from exc

    def orientation(self):
        """``(families, A)``: principal fiber families and the orientation tensor."""
        A = build_orientation(self.spec())
        return decompose_families(A, self.vf), A


@dataclass(frozen=True)
class SolverBlock:
    tol_u: float = 1e-6
    max_newton: int = 25
    staggered_passes: int = 1
    tol_stag: float = 1e-4
    max_bisections: int = 8
    local_tol: float = 1e-10
    local_max_iters: int = 50
    fd_eps: float = 1e-5
    threads: int = 0

    def __post_init__(self):
        if self.threads < 0:
            raise ConfigError("threads must be non-negative", key="threads")
        self.controls()

    def controls(self):
        kw = {f.name: getattr(self, f.name) for f in fields(SolverControls)}
        try:
            return SolverControls(**kw)
        except AnisofracError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class OutputBlock:
    directory: str = "output"
    vtk_stride: int = 0
    csv: str = ""

    def __post_init__(self):
        if self.vtk_stride < 0:
            raise ConfigError("vtk_stride must be non-negative", key="vtk_stride")


@dataclass(frozen=True)
class PolarBlock:
    stretch: float = 1.05
    angles: tuple = tuple(float(a) for a in range(360))
    times: tuple = (1e-6, 0.005, 0.05, 0.1)
    angle: float = 0.0
    samples: int = 60

    def __post_init__(self):
        if not self.stretch > 1.0:
            raise ConfigError("stretch must exceed 1", key="stretch")
        if not self.angles:
            raise ConfigError("angles must not be empty", key="angles")
        t = np.asarray(self.times, dtype=float)
        if t.size == 0 or t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ConfigError("times must be positive and ascending", key="times")
        if self.samples < 2:
            raise ConfigError("samples must be at least 2", key="samples")


def _default_material():
    return MaterialParams()


def _default_environment():
    return EnvState(theta=300.0, w_w=0.01)


@dataclass(frozen=True)
class SimJob:
    """Single-edge-notched fracture job."""

    geometry: Geometry = field(default_factory=Geometry)
    material: MaterialParams = field(default_factory=_default_material)
    environment: EnvState = field(default_factory=_default_environment)
    fibers: tuple = (FiberBlock(),)
    fracture: FractureParams = field(default_factory=FractureParams)
    loading: LoadProgram = field(default_factory=LoadProgram)
    solver: SolverBlock = field(default_factory=SolverBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @property
    def params(self):
        """Material constants with the fracture block's Gc and l0."""
        return replace(self.material, Gc=self.fracture.Gc, l0=self.fracture.l0)


@dataclass(frozen=True)
class PolarJob:
    """Material-point relaxation job for the point and polar drivers."""

    polar: PolarBlock = field(default_factory=PolarBlock)
    material: MaterialParams = field(default_factory=_default_material)
    environment: EnvState = field(default_factory=_default_environment)
    fibers: tuple = (FiberBlock(distribution="balanced"),)
    solver: SolverBlock = field(default_factory=SolverBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @property
    def params(self):
        return self.material


_EXCLUDED_MATERIAL = ("Gc", "l0", "kB")
_SECTION_TYPES = {
    "geometry": Geometry,
    "material": MaterialParams,
    "environment": EnvState,
    "fracture": FractureParams,
    "loading": LoadProgram,
    "solver": SolverBlock,
    "output": OutputBlock,
    "polar": PolarBlock,
}
_SIM_SECTIONS = ("geometry", "material", "environment", "fibers", "fracture", "loading",
                 "solver", "output")
_POLAR_SECTIONS = ("polar", "material", "environment", "fibers", "solver", "output")


def _keys(cls):
    out = {}
    defaults = cls()
    for f in fields(cls):
        if cls is MaterialParams and f.name in _EXCLUDED_MATERIAL:
            continue
        if cls is FiberBlock and f.name == "name":
            continue
        out[f.name] = getattr(defaults, f.name)
    return out


def _convert(raw, default, key, line, source):
    def fail(what):
        raise ConfigError(f"{key}: expected {what}, got {raw!r}", line=line, key=key,
                          source=source)

    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        fail("a boolean")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            fail("an integer")
    if isinstance(default, float):
        try:
            v = float(raw)
        except ValueError:
            fail("a number")
        if math.isnan(v):
            fail("a number")
        return v
    if isinstance(default, tuple):
        text = raw.strip()
        if ":" in text:
            parts = text.split(":")
            try:
                start, stop, step = (float(p) for p in parts)
            except ValueError:
                fail("a start:stop:step range")
            if not step > 0 or not stop > start:
                fail("an increasing start:stop:step range")
            n = int(math.floor((stop - start) / step - 1e-9)) + 1
            return tuple(float(start + i * step) for i in range(n))
        try:
            return tuple(float(p) for p in text.split(",") if p.strip())
        except ValueError:
            fail("a comma-separated list of numbers")
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    return text


def _read(text, source):
    """Split the text into ``{section: (header_line, {key: (raw, line)})}`` in file order."""
    sections = {}
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]") or len(s) < 3:
                raise ConfigError(f"malformed section header {s!r}", line=n, source=source)
            current = s[1:-1].strip()
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", line=n, source=source)
            sections[current] = (n, {})
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", line=n, source=source)
        if current is None:
            raise ConfigError("key outside of any section", line=n, source=source)
        key, raw = (p.strip() for p in s.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=n, source=source)
        entries = sections[current][1]
        if key in entries:
            raise ConfigError(f"duplicate key {key!r}", line=n, key=key, source=source)
        entries[key] = (raw, n)
    return sections


def _message(exc):
    return str(exc).split(": ", 1)[-1] if isinstance(exc, ConfigError) else str(exc)


def _build(cls, entries, header, source, base=None, extra=None):
    keys = _keys(cls)
    values = {}
    for key, (raw, line) in entries.items():
        if key not in keys:
            raise ConfigError(f"unknown key {key!r}", line=line, key=key, source=source)
        values[key] = _convert(raw, keys[key], key, line, source)
    try:
        start = base if base is not None else cls(**(extra or {}))
        return replace(start, **values)
    except (AnisofracError, TypeError) as exc:
        # apply the keys one at a time to name the first offending line
        obj = start
        for key, value in values.items():
            try:
                obj = replace(obj, **{key: value})
            except (AnisofracError, TypeError) as inner:
                raise ConfigError(_message(inner), line=entries[key][1], key=key,
                                  source=source) from inner
        raise ConfigError(_message(exc), line=header, source=source) from exc


def parse_config(text, source="<config>", kind=None):
    """Parse a job description.

    ``kind`` forces ``"sim"`` or ``"polar"``; by default the presence of a
    ``[polar]`` section decides.

    Raises
    ------
    ConfigError
        Unknown section or key, type mismatch or constraint violation; the
        message names the file position and key.
    """
    if kind not in (None, "sim", "polar"):
        raise ValueError(f"unknown job kind {kind!r}")
    sections = _read(text, source)
    if kind is None:
        kind = "polar" if "polar" in sections else "sim"
    allowed = _SIM_SECTIONS if kind == "sim" else _POLAR_SECTIONS
    job = SimJob() if kind == "sim" else PolarJob()
    parts = {}
    regions = []
    base_fibers = job.fibers[0]
    for name, (header, entries) in sections.items():
        if name.startswith("fibers."):
            region = name.split(".", 1)[1]
            if kind != "sim" or not region:
                raise ConfigError(f"section [{name}] is not allowed here", line=header,
                                  source=source)
            regions.append(_build(FiberBlock, entries, header, source,
                                  extra={"name": region}))
            continue
        if name not in allowed:
            raise ConfigError(f"unknown section [{name}]", line=header, source=source)
        if name == "fibers":
            if "y_min" in entries or "y_max" in entries:
                line = entries.get("y_min", entries.get("y_max"))[1]
                raise ConfigError("y ranges belong to [fibers.<region>] sections", line=line,
                                  source=source)
            base_fibers = _build(FiberBlock, entries, header, source, base=base_fibers)
            continue
        parts[name] = _build(_SECTION_TYPES[name], entries, header, source,
                             base=getattr(job, name))
    return replace(job, fibers=(base_fibers, *regions), **parts)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _section(name, obj, cls):
    lines = [f"[{name}]"]
    for key in _keys(cls):
        value = getattr(obj, key)
        if cls is FiberBlock and key in ("y_min", "y_max") and not obj.name:
            continue
        lines.append(f"{key} = {_format(value)}")
    return lines


def serialize(job):
    """Text that parses back to ``job``, listing every key explicitly."""
    out = []
    names = _SIM_SECTIONS if isinstance(job, SimJob) else _POLAR_SECTIONS
    for name in names:
        if name == "fibers":
            for block in job.fibers:
                title = "fibers" if not block.name else f"fibers.{block.name}"
                out += _section(title, block, FiberBlock) + [""]
            continue
        out += _section(name, getattr(job, name), _SECTION_TYPES[name]) + [""]
    return "\n".join(out)
