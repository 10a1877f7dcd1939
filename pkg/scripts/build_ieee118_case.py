#!/usr/bin/env python3
"""Regenerate data/cases/ieee118 from the tables embedded below.

Topology and generator placement/capacity follow the public IEEE 118-bus
test system (buses renumbered to 0-based ids). Parallel circuits between the
same bus pair are merged by adding susceptances, because the case format
treats lines as undirected node pairs. Reactances are per-unit on a 100 MVA
base; susceptance is 1/x with resistance neglected.

The original test system ships no bid data, so quadratic cost bases are
assigned by a documented rule: curvature shrinks with unit size and the
linear base follows a three-tier merit order with a small seeded jitter.
Flow limits are left unlimited here; dataset generation picks congested
lines and limits separately.
"""

import csv
from pathlib import Path

import numpy as np

# (from_bus, to_bus, reactance_pu) with 1-based bus ids; parallel circuits repeat
BRANCHES = [
    (1, 2, 0.0999), (1, 3, 0.0424), (4, 5, 0.00798), (3, 5, 0.108),
    (5, 6, 0.054), (6, 7, 0.0208), (8, 9, 0.0305), (8, 5, 0.0267),
    (9, 10, 0.0322), (4, 11, 0.0688), (5, 11, 0.0682), (11, 12, 0.0196),
    (2, 12, 0.0616), (3, 12, 0.16), (7, 12, 0.034), (11, 13, 0.0731),
    (12, 14, 0.0707), (13, 15, 0.2444), (14, 15, 0.195), (12, 16, 0.0834),
    (15, 17, 0.0437), (16, 17, 0.1801), (17, 18, 0.0505), (18, 19, 0.0493),
    (19, 20, 0.117), (15, 19, 0.0394), (20, 21, 0.0849), (21, 22, 0.097),
    (22, 23, 0.159), (23, 24, 0.0492), (23, 25, 0.08), (26, 25, 0.0382),
    (25, 27, 0.163), (27, 28, 0.0855), (28, 29, 0.0943), (30, 17, 0.0388),
    (8, 30, 0.0504), (26, 30, 0.086), (17, 31, 0.1563), (29, 31, 0.0331),
    (23, 32, 0.1153), (31, 32, 0.0985), (27, 32, 0.0755), (15, 33, 0.1244),
    (19, 34, 0.247), (35, 36, 0.0102), (35, 37, 0.0497), (33, 37, 0.142),
    (34, 36, 0.0268), (34, 37, 0.0094), (38, 37, 0.0375), (37, 39, 0.106),
    (37, 40, 0.168), (30, 38, 0.054), (39, 40, 0.0605), (40, 41, 0.0487),
    (40, 42, 0.183), (41, 42, 0.135), (43, 44, 0.2454), (34, 43, 0.1681),
    (44, 45, 0.0901), (45, 46, 0.1356), (46, 47, 0.127), (46, 48, 0.189),
    (47, 49, 0.0625), (42, 49, 0.323), (42, 49, 0.323), (45, 49, 0.186),
    (48, 49, 0.0505), (49, 50, 0.0752), (49, 51, 0.137), (51, 52, 0.0588),
    (52, 53, 0.1635), (53, 54, 0.122), (49, 54, 0.289), (49, 54, 0.291),
    (54, 55, 0.0707), (54, 56, 0.00955), (55, 56, 0.0151), (56, 57, 0.0966),
    (50, 57, 0.134), (56, 58, 0.0966), (51, 58, 0.0719), (54, 59, 0.2293),
    (56, 59, 0.251), (56, 59, 0.239), (55, 59, 0.2158), (59, 60, 0.145),
    (59, 61, 0.15), (60, 61, 0.0135), (60, 62, 0.0561), (61, 62, 0.0376),
    (63, 59, 0.0386), (63, 64, 0.02), (64, 61, 0.0268), (38, 65, 0.0986),
    (64, 65, 0.0302), (49, 66, 0.0919), (49, 66, 0.0919), (62, 66, 0.218),
    (62, 67, 0.117), (65, 66, 0.037), (66, 67, 0.1015), (65, 68, 0.016),
    (47, 69, 0.2778), (49, 69, 0.324), (68, 69, 0.037), (69, 70, 0.127),
    (24, 70, 0.4115), (70, 71, 0.0355), (24, 72, 0.196), (71, 72, 0.18),
    (71, 73, 0.0454), (70, 74, 0.1323), (70, 75, 0.141), (69, 75, 0.122),
    (74, 75, 0.0406), (76, 77, 0.148), (69, 77, 0.101), (75, 77, 0.1999),
    (77, 78, 0.0124), (78, 79, 0.0244), (77, 80, 0.0485), (77, 80, 0.105),
    (79, 80, 0.0704), (68, 81, 0.0202), (81, 80, 0.037), (77, 82, 0.0853),
    (82, 83, 0.03665), (83, 84, 0.132), (83, 85, 0.148), (84, 85, 0.0641),
    (85, 86, 0.123), (86, 87, 0.2074), (85, 88, 0.102), (85, 89, 0.173),
    (88, 89, 0.0712), (89, 90, 0.188), (89, 90, 0.0997), (90, 91, 0.0836),
    (89, 92, 0.0505), (89, 92, 0.1581), (91, 92, 0.1272), (92, 93, 0.0848),
    (92, 94, 0.158), (93, 94, 0.0732), (94, 95, 0.0434), (80, 96, 0.182),
    (82, 96, 0.053), (94, 96, 0.0869), (80, 97, 0.0934), (80, 98, 0.108),
    (80, 99, 0.206), (92, 100, 0.295), (94, 100, 0.058), (95, 96, 0.0547),
    (96, 97, 0.0885), (98, 100, 0.179), (99, 100, 0.0813), (100, 101, 0.1262),
    (92, 102, 0.0559), (101, 102, 0.112), (100, 103, 0.0525), (100, 104, 0.204),
    (103, 104, 0.1584), (103, 105, 0.1625), (100, 106, 0.229), (104, 105, 0.0378),
    (105, 106, 0.0547), (105, 107, 0.183), (105, 108, 0.0703), (106, 107, 0.183),
    (108, 109, 0.0288), (103, 110, 0.1813), (109, 110, 0.0762), (110, 111, 0.0755),
    (110, 112, 0.064), (17, 113, 0.0301), (32, 113, 0.203), (32, 114, 0.0612),
    (27, 115, 0.0741), (114, 115, 0.0104), (68, 116, 0.00405), (12, 117, 0.14),
    (75, 118, 0.0481), (76, 118, 0.0544),
]

# (bus, p_max_mw) with 1-based bus ids
GENERATORS = [
    (1, 100), (4, 100), (6, 100), (8, 100), (10, 550), (12, 185),
    (15, 100), (18, 100), (19, 100), (24, 100), (25, 320), (26, 414),
    (27, 100), (31, 107), (32, 100), (34, 100), (36, 100), (40, 100),
    (42, 100), (46, 119), (49, 304), (54, 148), (55, 100), (56, 100),
    (59, 255), (61, 260), (62, 100), (65, 491), (66, 492), (69, 805),
    (70, 100), (72, 100), (73, 100), (74, 100), (76, 100), (77, 100),
    (80, 577), (85, 100), (87, 104), (89, 707), (90, 100), (91, 100),
    (92, 100), (99, 100), (100, 352), (103, 140), (104, 100), (105, 100),
    (107, 100), (110, 100), (111, 136), (112, 100), (113, 100), (116, 100),
]

SLACK_BUS = 69  # 1-based
COST_SEED = 118


def cost_bases(p_max: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    c20 = np.clip(0.01 * (200.0 / p_max), 0.002, 0.05)
    tier = np.where(p_max >= 400, 18.0, np.where(p_max >= 150, 24.0, 30.0))
    jitter = np.random.default_rng(seed).uniform(-3.0, 3.0, size=p_max.size)
    c10 = np.maximum(tier + jitter, 5.0)
    return c20, c10


def main() -> None:
    out = Path(__file__).resolve().parent.parent / "data" / "cases" / "ieee118"
    out.mkdir(parents=True, exist_ok=True)

    merged: dict[tuple[int, int], float] = {}
    for f, t, x in BRANCHES:
        u, v = sorted((f - 1, t - 1))
        merged[(u, v)] = merged.get((u, v), 0.0) + 1.0 / x

    n = 118
    nodes = sorted({u for pair in merged for u in pair})
    assert nodes == list(range(n)), "branch table must touch every bus exactly once"

    adj = [[] for _ in range(n)]
    for u, v in merged:
        adj[u].append(v)
        adj[v].append(u)
    seen, stack = {0}, [0]
    while stack:
        for nbr in adj[stack.pop()]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    assert len(seen) == n, "topology must be connected"

    with open(out / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id"])
        for i in range(n):
            w.writerow([i])

    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "susceptance_pu", "flow_limit_mw"])
        for (u, v), b in sorted(merged.items()):
            w.writerow([u, v, f"{b:.17g}", ""])

    p_max = np.array([float(p) for _, p in GENERATORS])
    c20, c10 = cost_bases(p_max, COST_SEED)
    with open(out / "generators.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "g_min_mw", "g_max_mw", "c20", "c10"])
        for (bus, p), a, b in zip(GENERATORS, c20, c10):
            w.writerow([bus - 1, 0, p, f"{a:.17g}", f"{b:.17g}"])

    with open(out / "meta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["slack_node", SLACK_BUS - 1])

    print(f"wrote {out}: {n} nodes, {len(merged)} lines, {len(GENERATORS)} generators, "
          f"capacity {p_max.sum():.0f} MW")


if __name__ == "__main__":
    main()
