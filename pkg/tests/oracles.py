"""Independent oracles used by the unit and acceptance suites.

Everything here is dependency-free, written against the documented behavior
only, and deliberately structured differently from the implementation paths
it checks.
"""

from __future__ import annotations

import math


# --- region grouping: level-set flood fill over a dict of non-zero cells ---

def oracle_neighbours(x, y, connectivity):
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (1, -1), (-1, 1), (1, 1)]
    return [(x + dx, y + dy) for dx, dy in steps]


def oracle_coupled(a, b, ratio):
    if ratio is None:
        return True
    return max(a, b) <= ratio * min(a, b)


def oracle_components(grid, connectivity, ratio, eps):
    """All (positions, energy) components of one 2-D map, seed-scan order."""
    height = len(grid)
    width = len(grid[0]) if height else 0
    cells = {
        (x, y): grid[y][x]
        for y in range(height)
        for x in range(width)
        if grid[y][x] > eps
    }
    unassigned = set(cells)
    components = []
    for y in range(height):
        for x in range(width):
            if (x, y) not in unassigned:
                continue
            component = {(x, y)}
            unassigned.discard((x, y))
            frontier = [(x, y)]
            while frontier:
                grown = []
                for px, py in frontier:
                    for nx, ny in oracle_neighbours(px, py, connectivity):
                        if (nx, ny) in unassigned and oracle_coupled(
                            cells[(px, py)], cells[(nx, ny)], ratio
                        ):
                            unassigned.discard((nx, ny))
                            component.add((nx, ny))
                            grown.append((nx, ny))
                frontier = grown
            energy = math.fsum(cells[p] for p in component) / len(component)
            components.append((frozenset(component), energy))
    return components


# --- k-means: exhaustive set-partition optimum -------------------------------

def _restricted_growth_strings(n, blocks):
    """Every assignment of n items into exactly `blocks` labelled-canonically."""
    def grow(prefix, used):
        if len(prefix) == n:
            if used == blocks:
                yield tuple(prefix)
            return
        for label in range(min(used + 1, blocks)):
            prefix.append(label)
            yield from grow(prefix, max(used, label + 1))
            prefix.pop()

    yield from grow([], 0)


def exhaustive_partition_optimum(points, clusters):
    """Minimum SSE over every partition of `points` into `clusters` groups."""
    n = len(points)
    dim = len(points[0])
    best = math.inf
    for labels in _restricted_growth_strings(n, clusters):
        sse = 0.0
        for cluster in range(clusters):
            members = [points[i] for i in range(n) if labels[i] == cluster]
            mean = [math.fsum(p[d] for p in members) / len(members) for d in range(dim)]
            sse += math.fsum((p[d] - mean[d]) ** 2 for p in members for d in range(dim))
        if sse < best:
            best = sse
    return best


def nearest_centroid_oracle(row, centroids):
    """All-pairs scan with fsum distances; ties resolved to the lowest index."""
    dim = len(row)
    distances = [
        math.fsum((float(row[d]) - float(c[d])) ** 2 for d in range(dim))
        for c in centroids
    ]
    return min(range(len(centroids)), key=lambda j: (distances[j], j))


# --- cosine similarity in extended precision ---------------------------------

def cosine_oracle(a, b):
    xs = [float(v) for v in a.flat().tolist()]
    ys = [float(v) for v in b.flat().tolist()]
    dot = math.fsum(x * y for x, y in zip(xs, ys))
    nx = math.sqrt(math.fsum(x * x for x in xs))
    ny = math.sqrt(math.fsum(y * y for y in ys))
    return dot / (nx * ny)


# --- PR sweep: threshold enumeration with anchor ------------------------------

def sweep_oracle(scores, correctness):
    """PR points and trapezoidal AUC recomputed from scratch per threshold."""
    pairs = sorted(zip(scores, correctness), key=lambda p: -p[0])
    q = len(pairs)
    thresholds = sorted({s for s, _ in pairs}, reverse=True)
    points = []
    for threshold in thresholds:
        accepted = [(s, c) for s, c in pairs if s >= threshold]
        correct = sum(1 for _, c in accepted if c)
        points.append((correct / len(accepted), correct / q))
    points = [(points[0][0], 0.0)] + points
    auc = math.fsum(
        (r1 - r0) * (p0 + p1) / 2.0 for (p0, r0), (p1, r1) in zip(points, points[1:])
    )
    return points, auc
