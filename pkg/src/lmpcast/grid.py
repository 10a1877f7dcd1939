"""Grid case parsing and the spectral machinery built on top of it.

A case is a directory of four CSV files:

    nodes.csv       node_id                         (one row per node, 0..N-1)
    edges.csv       from,to,susceptance_pu,flow_limit_mw   (empty limit = unlimited)
    generators.csv  node,g_min_mw,g_max_mw,c20,c10
    meta.csv        key,value                       (must define slack_node)

Edges are undirected; each one is stored with from < to and flow on a line is
counted positive in that direction. Susceptances are per-unit on a common MVA
base.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CaseFormatError(ValueError):
    """Malformed case file; message carries file name and line number."""


class CaseValidationError(ValueError):
    """Structurally valid file describing an invalid grid."""


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, last_estimate: float):
        super().__init__(message)
        self.last_estimate = last_estimate


@dataclass(frozen=True)
class Edge:
    from_node: int
    to_node: int
    susceptance: float
    flow_limit: float  # MW; math.inf when unlimited


@dataclass(frozen=True)
class Generator:
    node: int
    g_min: float
    g_max: float
    c20: float
    c10: float


@dataclass(frozen=True)
class GridGraph:
    node_count: int
    edges: tuple[Edge, ...]
    generators: tuple[Generator, ...]
    slack_node: int

    @property
    def line_count(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class SpectralBasis:
    laplacian: np.ndarray
    lambda_max: float
    scaled_laplacian: np.ndarray
    cheb_polys: tuple[np.ndarray, ...] = field(repr=False)


@dataclass(frozen=True)
class PtdfMatrix:
    values: np.ndarray  # (line_count, node_count)
    slack_node: int


def _read_rows(path: Path, expected_header: list[str]) -> list[tuple[int, list[str]]]:
    if not path.exists():
        raise CaseFormatError(f"{path}: file missing")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=1) if row]
    if not rows:
        raise CaseFormatError(f"{path}:1: empty file, expected header {','.join(expected_header)}")
    header_line, header = rows[0]
    if [h.strip() for h in header] != expected_header:
        raise CaseFormatError(
            f"{path}:{header_line}: bad header {','.join(header)!r}, "
            f"expected {','.join(expected_header)}")
    return rows[1:]


def _parse_int(path: Path, lineno: int, text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise CaseFormatError(f"{path}:{lineno}: {what} must be an integer, got {text!r}") from None


def _parse_float(path: Path, lineno: int, text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise CaseFormatError(f"{path}:{lineno}: {what} must be a number, got {text!r}") from None


def load_case(path) -> GridGraph:
    """Parse and validate a case directory into a GridGraph."""
    case = Path(path)
    if not case.is_dir():
        raise CaseFormatError(f"{case}: not a case directory")

    node_ids = []
    for lineno, row in _read_rows(case / "nodes.csv", ["node_id"]):
        node_ids.append(_parse_int(case / "nodes.csv", lineno, row[0], "node_id"))
    n = len(node_ids)
    if n == 0:
        raise CaseValidationError("case has no nodes")
    if sorted(node_ids) != list(range(n)):
        raise CaseValidationError(f"node ids must be exactly 0..{n - 1}")

    edges = []
    seen_pairs: set[tuple[int, int]] = set()
    epath = case / "edges.csv"
    for lineno, row in _read_rows(epath, ["from", "to", "susceptance_pu", "flow_limit_mw"]):
        if len(row) != 4:
            raise CaseFormatError(f"{epath}:{lineno}: expected 4 fields, got {len(row)}")
        u = _parse_int(epath, lineno, row[0], "from")
        v = _parse_int(epath, lineno, row[1], "to")
        b = _parse_float(epath, lineno, row[2], "susceptance_pu")
        lim = math.inf if row[3].strip() == "" else _parse_float(epath, lineno, row[3], "flow_limit_mw")
        if not (0 <= u < n and 0 <= v < n):
            raise CaseValidationError(f"edge ({u},{v}) references a node outside [0,{n})")
        if u == v:
            raise CaseValidationError(f"self-loop at node {u}")
        pair = (min(u, v), max(u, v))
        if pair in seen_pairs:
            raise CaseValidationError(f"duplicate undirected edge {pair}")
        seen_pairs.add(pair)
        if b <= 0:
            raise CaseValidationError(f"edge {pair} has non-positive susceptance {b}")
        if lim <= 0:
            raise CaseValidationError(f"edge {pair} has non-positive flow limit {lim}")
        edges.append(Edge(pair[0], pair[1], b, lim))

    gens = []
    gpath = case / "generators.csv"
    for lineno, row in _read_rows(gpath, ["node", "g_min_mw", "g_max_mw", "c20", "c10"]):
        if len(row) != 5:
            raise CaseFormatError(f"{gpath}:{lineno}: expected 5 fields, got {len(row)}")
        node = _parse_int(gpath, lineno, row[0], "node")
        g_min = _parse_float(gpath, lineno, row[1], "g_min_mw")
        g_max = _parse_float(gpath, lineno, row[2], "g_max_mw")
        c20 = _parse_float(gpath, lineno, row[3], "c20")
        c10 = _parse_float(gpath, lineno, row[4], "c10")
        if not 0 <= node < n:
            raise CaseValidationError(f"generator at node {node} outside [0,{n})")
        if g_min > g_max:
            raise CaseValidationError(f"generator at node {node} has g_min {g_min} > g_max {g_max}")
        gens.append(Generator(node, g_min, g_max, c20, c10))
    if not gens:
        raise CaseValidationError("case has no generators")

    meta = {}
    mpath = case / "meta.csv"
    for lineno, row in _read_rows(mpath, ["key", "value"]):
        if len(row) != 2:
            raise CaseFormatError(f"{mpath}:{lineno}: expected 2 fields, got {len(row)}")
        meta[row[0].strip()] = (lineno, row[1].strip())
    if "slack_node" not in meta:
        raise CaseFormatError(f"{mpath}: missing slack_node entry")
    slack = _parse_int(mpath, meta["slack_node"][0], meta["slack_node"][1], "slack_node")
    if not 0 <= slack < n:
        raise CaseValidationError(f"slack_node {slack} outside [0,{n})")

    graph = GridGraph(n, tuple(edges), tuple(gens), slack)
    if not _is_connected(graph):
        raise CaseValidationError("graph is not connected")
    return graph


def write_case_dir(graph: GridGraph, path) -> Path:
    """Write a GridGraph back out as a case directory (inverse of load_case)."""
    case = Path(path)
    case.mkdir(parents=True, exist_ok=True)
    fmt = "{:.17g}".format
    (case / "nodes.csv").write_text(
        "node_id\n" + "".join(f"{i}\n" for i in range(graph.node_count)))
    (case / "edges.csv").write_text(
        "from,to,susceptance_pu,flow_limit_mw\n" + "".join(
            f"{e.from_node},{e.to_node},{fmt(e.susceptance)},"
            f"{'' if math.isinf(e.flow_limit) else fmt(e.flow_limit)}\n"
            for e in graph.edges))
    (case / "generators.csv").write_text(
        "node,g_min_mw,g_max_mw,c20,c10\n" + "".join(
            f"{g.node},{fmt(g.g_min)},{fmt(g.g_max)},{fmt(g.c20)},{fmt(g.c10)}\n"
            for g in graph.generators))
    (case / "meta.csv").write_text(f"key,value\nslack_node,{graph.slack_node}\n")
    return case


def _is_connected(graph: GridGraph) -> bool:
    if graph.node_count == 1:
        return True
    adjacency: list[list[int]] = [[] for _ in range(graph.node_count)]
    for e in graph.edges:
        adjacency[e.from_node].append(e.to_node)
        adjacency[e.to_node].append(e.from_node)
    seen = {0}
    stack = [0]
    while stack:
        for nbr in adjacency[stack.pop()]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen) == graph.node_count


def adjacency_matrix(graph: GridGraph, weighted: bool = False) -> np.ndarray:
    """Symmetric adjacency; entries are 1 or the line susceptance."""
    a = np.zeros((graph.node_count, graph.node_count))
    for e in graph.edges:
        w = e.susceptance if weighted else 1.0
        a[e.from_node, e.to_node] = w
        a[e.to_node, e.from_node] = w
    return a


def normalized_laplacian(graph: GridGraph, weighted: bool = False) -> np.ndarray:
    """L = I - D^(-1/2) A D^(-1/2); symmetric with spectrum in [0, 2]."""
    a = adjacency_matrix(graph, weighted=weighted)
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        isolated = int(np.argmin(deg))
        raise CaseValidationError(f"node {isolated} has degree zero")
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    lap = -a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    np.fill_diagonal(lap, 1.0)
    # exact symmetry keeps eigen-based oracles clean
    return (lap + lap.T) / 2.0


def max_eigenvalue(matrix: np.ndarray, tol: float = 1e-9, max_iter: int = 10000) -> float:
    """Dominant eigenvalue of a symmetric matrix by power iteration.

    The start vector is all-ones plus a small fixed ramp so it is never
    orthogonal to the dominant eigenvector and runs are deterministic.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"max_eigenvalue: matrix must be square, got {m.shape}")
    n = m.shape[0]
    v = np.ones(n) + 1e-4 * np.arange(n) / max(n, 1)
    v /= np.linalg.norm(v)
    est = float(v @ m @ v)
    for _ in range(max_iter):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0  # v in the null space of an all-zero action
        v = w / norm
        new = float(v @ m @ v)
        if abs(new - est) <= tol * max(1.0, abs(new)):
            return new
        est = new
    raise PowerIterationError(
        f"power iteration did not converge in {max_iter} iterations", est)


def chebyshev_basis(laplacian: np.ndarray, lambda_max: float, K: int) -> SpectralBasis:
    """Chebyshev polynomials T_0..T_{K-1} of the scaled Laplacian."""
    if K < 1:
        raise ValueError(f"chebyshev_basis: K must be >= 1, got {K}")
    if lambda_max <= 0:
        raise ValueError(f"chebyshev_basis: lambda_max must be positive, got {lambda_max}")
    lap = np.asarray(laplacian, dtype=np.float64)
    n = lap.shape[0]
    scaled = 2.0 * lap / lambda_max - np.eye(n)
    polys = [np.eye(n)]
    if K >= 2:
        polys.append(scaled.copy())
    for _ in range(2, K):
        polys.append(2.0 * scaled @ polys[-1] - polys[-2])
    return SpectralBasis(lap, float(lambda_max), scaled, tuple(polys))


def incidence_matrix(graph: GridGraph) -> np.ndarray:
    """(line_count, node_count) oriented incidence: +1 at from, -1 at to."""
    a = np.zeros((graph.line_count, graph.node_count))
    for k, e in enumerate(graph.edges):
        a[k, e.from_node] = 1.0
        a[k, e.to_node] = -1.0
    return a


def ptdf(graph: GridGraph) -> PtdfMatrix:
    """Line-flow sensitivities to nodal injection withdrawn at the slack.

    Row k gives MW on line k (positive from_node -> to_node) per MW injected
    at each node. The slack column is identically zero.
    """
    inc = incidence_matrix(graph)
    b = np.array([e.susceptance for e in graph.edges])
    b_branch = b[:, None] * inc
    b_bus = inc.T @ b_branch
    keep = [i for i in range(graph.node_count) if i != graph.slack_node]
    reduced = b_bus[np.ix_(keep, keep)]
    try:
        sens = np.linalg.solve(reduced.T, b_branch[:, keep].T).T
    except np.linalg.LinAlgError:
        raise CaseValidationError(
            "susceptance matrix is singular after slack removal (disconnected graph?)") from None
    values = np.zeros((graph.line_count, graph.node_count))
    values[:, keep] = sens
    return PtdfMatrix(values, graph.slack_node)
