import math

import numpy as np
import pytest

from lmpcast.grid import Edge, Generator, GridGraph


def write_case(root, nodes, edges, generators, slack):
    """Write a case directory; edges = (u, v, b, limit-or-None)."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "nodes.csv").write_text("node_id\n" + "".join(f"{i}\n" for i in nodes))
    lines = ["from,to,susceptance_pu,flow_limit_mw"]
    for u, v, b, lim in edges:
        lines.append(f"{u},{v},{b},{'' if lim is None else lim}")
    (root / "edges.csv").write_text("\n".join(lines) + "\n")
    lines = ["node,g_min_mw,g_max_mw,c20,c10"]
    for g in generators:
        lines.append(",".join(str(x) for x in g))
    (root / "generators.csv").write_text("\n".join(lines) + "\n")
    (root / "meta.csv").write_text(f"key,value\nslack_node,{slack}\n")
    return root


def random_connected_graph(rng: np.random.Generator, n: int,
                           extra_edges: int | None = None,
                           n_gens: int | None = None) -> GridGraph:
    """Spanning tree plus a few chords; generators scattered at random."""
    edges = {}
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges[(u, v)] = float(rng.uniform(2.0, 20.0))
    if extra_edges is None:
        extra_edges = int(rng.integers(0, n))
    for _ in range(extra_edges):
        u, v = sorted(int(x) for x in rng.choice(n, 2, replace=False))
        edges.setdefault((u, v), float(rng.uniform(2.0, 20.0)))
    edge_t = tuple(Edge(u, v, b, math.inf) for (u, v), b in sorted(edges.items()))
    if n_gens is None:
        n_gens = int(rng.integers(2, max(3, n)))
    gens = tuple(
        Generator(int(rng.integers(0, n)), 0.0, float(rng.uniform(80.0, 400.0)),
                  float(rng.uniform(0.005, 0.06)), float(rng.uniform(5.0, 40.0)))
        for _ in range(n_gens))
    return GridGraph(n, edge_t, gens, 0)


@pytest.fixture(scope="session")
def toy3_case_dir():
    import pathlib
    path = pathlib.Path(__file__).resolve().parent.parent / "data" / "cases" / "toy3"
    assert path.is_dir()
    return path


@pytest.fixture(scope="session")
def ieee118_case_dir():
    import pathlib
    path = pathlib.Path(__file__).resolve().parent.parent / "data" / "cases" / "ieee118"
    assert path.is_dir()
    return path
