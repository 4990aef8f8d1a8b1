"""Network data model, MATPOWER case parsing and bus admittance assembly."""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class CaseParseError(ValueError):
    """Malformed case text; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class NetworkValidationError(ValueError):
    pass


class BusKind(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


# MATPOWER bus type codes
_KIND_FROM_CODE = {3: BusKind.SLACK, 2: BusKind.PV, 1: BusKind.PQ}
_CODE_FROM_KIND = {v: k for k, v in _KIND_FROM_CODE.items()}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float = 0.0
    q_demand: float = 0.0
    v_setpoint: float = 1.0
    theta_setpoint: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    original_id: int | None = None

    @property
    def label(self) -> int:
        return self.id if self.original_id is None else self.original_id


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float
    q_gen: float = 0.0
    v_setpoint: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Network:
    """A bus/branch network in per unit with dense 0-based bus indexing."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    generators: tuple[Generator, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def kinds(self) -> tuple[BusKind, ...]:
        return tuple(b.kind for b in self.buses)

    @property
    def slack(self) -> int:
        for i, b in enumerate(self.buses):
            if b.kind is BusKind.SLACK:
                return i
        raise NetworkValidationError("network has no slack bus")

    def validate(self) -> "Network":
        n = self.n_bus
        labels = [b.label for b in self.buses]
        if len(set(labels)) != len(labels):
            dup = sorted({x for x in labels if labels.count(x) > 1})
            raise NetworkValidationError(f"duplicate bus id(s): {dup}")
        for i, b in enumerate(self.buses):
            if b.id != i:
                raise NetworkValidationError(f"bus at position {i} has internal id {b.id}")
            if b.kind is not BusKind.PQ and not b.v_setpoint > 0:
                raise NetworkValidationError(f"bus {b.label}: v_setpoint must be > 0")
        if not any(b.kind is BusKind.SLACK for b in self.buses):
            raise NetworkValidationError("network has no slack bus")
        for k, br in enumerate(self.branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise NetworkValidationError(f"branch {k} references a missing bus")
            if br.r == 0 and br.x == 0:
                raise NetworkValidationError(f"branch {k} has zero impedance")
            if not br.tap > 0:
                raise NetworkValidationError(f"branch {k} has non-positive tap")
        for g in self.generators:
            if not 0 <= g.bus < n:
                raise NetworkValidationError(f"generator references missing bus {g.bus}")
        return self

    def generation(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus summed in-service (p_gen, q_gen)."""
        pg = np.zeros(self.n_bus)
        qg = np.zeros(self.n_bus)
        for g in self.generators:
            if g.in_service:
                pg[g.bus] += g.p_gen
                qg[g.bus] += g.q_gen
        return pg, qg

    def specified_injections(self) -> tuple[np.ndarray, np.ndarray]:
        pg, qg = self.generation()
        pd = np.array([b.p_demand for b in self.buses])
        qd = np.array([b.q_demand for b in self.buses])
        return pg - pd, qg - qd

    def with_branch(self, index: int, **changes) -> "Network":
        branches = list(self.branches)
        branches[index] = replace(branches[index], **changes)
        return replace(self, branches=tuple(branches))

    # canonical JSON ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [
                {
                    "id": b.id,
                    "original_id": b.original_id,
                    "kind": b.kind.value,
                    "p_demand": b.p_demand,
                    "q_demand": b.q_demand,
                    "v_setpoint": b.v_setpoint,
                    "theta_setpoint": b.theta_setpoint,
                    "shunt_g": b.shunt_g,
                    "shunt_b": b.shunt_b,
                }
                for b in self.buses
            ],
            "branches": [
                {
                    "from_bus": br.from_bus,
                    "to_bus": br.to_bus,
                    "r": br.r,
                    "x": br.x,
                    "b_charging": br.b_charging,
                    "tap": br.tap,
                    "shift": br.shift,
                    "in_service": br.in_service,
                }
                for br in self.branches
            ],
            "generators": [
                {
                    "bus": g.bus,
                    "p_gen": g.p_gen,
                    "q_gen": g.q_gen,
                    "v_setpoint": g.v_setpoint,
                    "in_service": g.in_service,
                }
                for g in self.generators
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        buses = [
            Bus(**{**b, "kind": BusKind(b["kind"])}) for b in d["buses"]
        ]
        return cls(
            buses=tuple(buses),
            branches=tuple(Branch(**br) for br in d["branches"]),
            base_mva=d["base_mva"],
            generators=tuple(Generator(**g) for g in d["generators"]),
            name=d.get("name", ""),
        ).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# MATPOWER version-2 parsing
# ---------------------------------------------------------------------------

_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}
_SKIPPED_WARN = {"gencost", "dcline", "dclinecost", "areas", "gentype", "genfuel"}
_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # '%' inside quoted strings only occurs in cell arrays we skip anyway
    idx = line.find("%")
    return line if idx < 0 else line[:idx]


def _read_tables(text: str) -> tuple[dict[str, list[tuple[int, list[float]]]], dict[str, str]]:
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    scalars: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        code = _strip_comment(lines[i]).strip()
        i += 1
        m = _ASSIGN.match(code)
        if not m:
            continue
        key, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("{"):
            # cell array (bus names etc.): skip to its closing brace
            depth = rhs.count("{") - rhs.count("}")
            while depth > 0 and i < len(lines):
                seg = _strip_comment(lines[i])
                depth += seg.count("{") - seg.count("}")
                i += 1
            continue
        if not rhs.startswith("["):
            scalars[key] = rhs.rstrip(";").strip().strip("'\"")
            continue
        rows: list[tuple[int, list[float]]] = []
        body = rhs[1:]
        body_lineno = lineno
        while True:
            closed = "]" in body
            chunk = body.split("]", 1)[0] if closed else body
            for piece in chunk.split(";"):
                piece = piece.strip()
                if not piece:
                    continue
                try:
                    values = [float(tok) for tok in piece.replace(",", " ").split()]
                except ValueError:
                    raise CaseParseError(f"non-numeric entry in mpc.{key}: {piece!r}", body_lineno)
                rows.append((body_lineno, values))
            if closed:
                break
            if i >= len(lines):
                raise CaseParseError(f"unterminated matrix mpc.{key}", lineno)
            body = _strip_comment(lines[i])
            body_lineno = i + 1
            i += 1
        tables[key] = rows
    return tables, scalars


def _check_table(name: str, rows: list[tuple[int, list[float]]]) -> None:
    if not rows:
        raise CaseParseError(f"mpc.{name} is empty")
    width = len(rows[0][1])
    for lineno, values in rows:
        if len(values) != width or len(values) < _MIN_COLS[name]:
            raise CaseParseError(
                f"mpc.{name} row has {len(values)} columns, expected {max(width, _MIN_COLS[name])}",
                lineno,
            )


def parse_matpower_case(text: str, name: str = "") -> Network:
    """Parse MATPOWER version-2 case text into a per-unit :class:`Network`."""
    tables, scalars = _read_tables(text)
    if scalars.get("version", "2") != "2":
        raise CaseParseError(f"unsupported case format version {scalars['version']!r}")
    if "baseMVA" not in scalars:
        raise CaseParseError("missing mpc.baseMVA")
    try:
        base = float(scalars["baseMVA"])
    except ValueError:
        raise CaseParseError(f"bad baseMVA {scalars['baseMVA']!r}")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseParseError(f"missing mpc.{key} table")
        _check_table(key, tables[key])
    for key in sorted(set(tables) - {"bus", "gen", "branch"}):
        if key in _SKIPPED_WARN:
            logger.warning("skipping unsupported MATPOWER field mpc.%s", key)
        else:
            logger.debug("ignoring mpc.%s", key)

    index: dict[int, int] = {}
    raw_buses = []
    for lineno, row in tables["bus"]:
        bid = int(row[0])
        if bid in index:
            raise NetworkValidationError(f"duplicate bus id {bid} (line {lineno})")
        code = int(row[1])
        if code == 4:
            raise CaseParseError(f"isolated bus {bid} (type 4) is not supported", lineno)
        if code not in _KIND_FROM_CODE:
            raise CaseParseError(f"unknown bus type {code}", lineno)
        index[bid] = len(raw_buses)
        raw_buses.append(row)

    gens = []
    first_vg: dict[int, float] = {}
    for lineno, row in tables["gen"]:
        bid = int(row[0])
        if bid not in index:
            raise NetworkValidationError(f"generator at unknown bus {bid} (line {lineno})")
        on = row[7] > 0
        g = Generator(
            bus=index[bid],
            p_gen=row[1] / base,
            q_gen=row[2] / base,
            v_setpoint=row[5],
            in_service=on,
        )
        gens.append(g)
        if on and g.bus not in first_vg:
            first_vg[g.bus] = g.v_setpoint

    buses = []
    for i, row in enumerate(raw_buses):
        kind = _KIND_FROM_CODE[int(row[1])]
        if kind is BusKind.PV and i not in first_vg:
            logger.warning("PV bus %d has no in-service generator; treating as PQ", int(row[0]))
            kind = BusKind.PQ
        v_set = first_vg.get(i, row[7]) if kind is not BusKind.PQ else row[7]
        buses.append(
            Bus(
                id=i,
                kind=kind,
                p_demand=row[2] / base,
                q_demand=row[3] / base,
                v_setpoint=v_set,
                theta_setpoint=math.radians(row[8]),
                shunt_g=row[4] / base,
                shunt_b=row[5] / base,
                original_id=int(row[0]),
            )
        )

    branches = []
    for lineno, row in tables["branch"]:
        f, t = int(row[0]), int(row[1])
        if f not in index or t not in index:
            raise NetworkValidationError(f"branch {f}-{t} references unknown bus (line {lineno})")
        branches.append(
            Branch(
                from_bus=index[f],
                to_bus=index[t],
                r=row[2],
                x=row[3],
                b_charging=row[4],
                tap=row[8] if row[8] != 0 else 1.0,
                shift=math.radians(row[9]),
                in_service=row[10] > 0,
            )
        )
    net = Network(buses=tuple(buses), branches=tuple(branches), base_mva=base,
                  generators=tuple(gens), name=name or scalars.get("name", ""))
    return net.validate()


def load_case(path: str | Path) -> Network:
    """Read a case from a file path, or a bundled case by name (``ieee30``, ``ieee118``)."""
    p = Path(path)
    if p.exists():
        return parse_matpower_case(p.read_text(), name=p.stem)
    stem = p.name[:-2] if p.name.endswith(".m") else p.name
    bundled = resources.files("gridflow.data").joinpath(f"{stem}.m")
    if bundled.is_file():
        return parse_matpower_case(bundled.read_text(), name=stem)
    raise FileNotFoundError(f"no such case file: {path}")


def _raw(value: float, forward) -> float:
    """Find a raw case value that `forward` maps back to `value` exactly."""
    guess = value
    for _ in range(64):
        got = forward(guess)
        if got == value:
            return guess
        guess = math.nextafter(guess, math.inf if got < value else -math.inf)
    return value


def serialize_matpower_case(net: Network) -> str:
    """Emit MATPOWER version-2 text that parses back to an identical network."""
    base = net.base_mva
    mw = lambda v: _raw(v * base, lambda r: r / base)  # noqa: E731
    deg = lambda v: _raw(math.degrees(v), math.radians)  # noqa: E731
    out = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';",
           f"mpc.baseMVA = {base!r};", "", "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
           "mpc.bus = ["]
    for b in net.buses:
        vals = [b.label, _CODE_FROM_KIND[b.kind], mw(b.p_demand), mw(b.q_demand), mw(b.shunt_g),
                mw(b.shunt_b), 1, b.v_setpoint, deg(b.theta_setpoint), 0, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(repr(v) for v in vals) + ";")
    out += ["];", "", "mpc.gen = ["]
    for g in net.generators:
        vals = [net.buses[g.bus].label, mw(g.p_gen), mw(g.q_gen), 0, 0, g.v_setpoint, base,
                1 if g.in_service else 0, 0, 0]
        out.append("\t" + "\t".join(repr(v) for v in vals) + ";")
    out += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        vals = [net.buses[br.from_bus].label, net.buses[br.to_bus].label, br.r, br.x, br.b_charging,
                0, 0, 0, br.tap, deg(br.shift), 1 if br.in_service else 0, -360, 360]
        out.append("\t" + "\t".join(repr(v) for v in vals) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Admittance matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Complex bus admittance matrix in CSR layout with an explicit sparsity pattern."""

    matrix: sp.csr_matrix = field(repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def G(self) -> sp.csr_matrix:
        return self.matrix.real.tocsr()

    @property
    def B(self) -> sp.csr_matrix:
        return self.matrix.imag.tocsr()

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rows, columns and complex values of the stored pattern."""
        coo = self.matrix.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data

    def todense(self) -> np.ndarray:
        return self.matrix.toarray()


def branch_admittances(br: Branch) -> tuple[complex, complex, complex, complex]:
    """(Y_ff, Y_ft, Y_tf, Y_tt) of the pi model of one branch."""
    if br.r == 0 and br.x == 0:
        raise NetworkValidationError("zero-impedance branch")
    y = br.series_admittance
    half_b = 0.5j * br.b_charging
    t = br.tap
    yff = y / (t * t) + half_b
    ytt = y + half_b
    yft = -y / (t * complex(math.cos(-br.shift), math.sin(-br.shift)))
    ytf = -y / (t * complex(math.cos(br.shift), math.sin(br.shift)))
    return yff, yft, ytf, ytt


def build_ybus(net: Network) -> AdmittanceMatrix:
    """Assemble Y-bus from in-service branches and bus shunts.

    Each entry is an exactly rounded sum of its contributions, so the result
    does not depend on branch order.
    """
    n = net.n_bus
    contrib: dict[tuple[int, int], list[complex]] = {(i, i): [] for i in range(n)}
    for i, b in enumerate(net.buses):
        if b.shunt_g or b.shunt_b:
            contrib[(i, i)].append(complex(b.shunt_g, b.shunt_b))
    for br in net.branches:
        if not br.in_service:
            continue
        yff, yft, ytf, ytt = branch_admittances(br)
        f, t = br.from_bus, br.to_bus
        contrib[(f, f)].append(yff)
        contrib[(t, t)].append(ytt)
        contrib.setdefault((f, t), []).append(yft)
        contrib.setdefault((t, f), []).append(ytf)
    keys = sorted(contrib)
    rows = np.fromiter((k[0] for k in keys), dtype=np.int64, count=len(keys))
    cols = np.fromiter((k[1] for k in keys), dtype=np.int64, count=len(keys))
    vals = np.array(
        [complex(math.fsum(v.real for v in contrib[k]), math.fsum(v.imag for v in contrib[k])) for k in keys],
        dtype=complex,
    )
    # keys are sorted row-major, so this is already canonical CSR order
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    mat = sp.csr_matrix((vals, cols, indptr), shape=(n, n))
    return AdmittanceMatrix(mat)


def check_connectivity(net: Network) -> list[list[int]]:
    """Connected components over in-service branches; the slack component comes first."""
    adj: list[list[int]] = [[] for _ in range(net.n_bus)]
    for br in net.branches:
        if br.in_service:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = [False] * net.n_bus
    comps = []
    for start in range(net.n_bus):
        if seen[start]:
            continue
        seen[start] = True
        comp = [start]
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    comp.append(v)
                    queue.append(v)
        comps.append(sorted(comp))
    try:
        s = net.slack
    except NetworkValidationError:
        return comps
    comps.sort(key=lambda c: (s not in c, c[0]))
    return comps


def is_connected(net: Network) -> bool:
    return len(check_connectivity(net)) == 1
