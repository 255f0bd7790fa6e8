"""Skeleton graphs, adjacency normalization, and multiscale coarsening.

The shipped coarsening tables merge anatomically close joints
(elbow+hand, knee+foot, ...) into one coarse vertex per group; they are
plausible reconstructions of the usual 16 -> 10 -> 5 (-> 3) hierarchy and
can be overridden with custom tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class TopologyError(ValueError):
    """The skeleton graph violates a structural requirement."""


class ConfigurationError(ValueError):
    """An unsupported or inconsistent configuration was requested."""


@dataclass(frozen=True)
class SkeletonGraph:
    """An undirected, connected skeleton with a precomputed symmetric
    normalized adjacency D^{-1/2} (A + I) D^{-1/2}."""

    vertex_count: int
    edges: tuple
    normalized_adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.vertex_count < 1:
            raise TopologyError("graph needs at least one vertex")
        canon = []
        for (u, v) in self.edges:
            if u == v:
                raise TopologyError(f"self-loop on vertex {u}")
            if not (0 <= u < self.vertex_count and 0 <= v < self.vertex_count):
                raise TopologyError(f"edge ({u},{v}) references invalid vertex")
            canon.append((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", tuple(sorted(set(canon))))
        object.__setattr__(self, "normalized_adjacency", normalize_adjacency(self))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.vertex_count, self.vertex_count))
        for (u, v) in self.edges:
            a[u, v] = a[v, u] = 1.0
        return a


def normalize_adjacency(g: SkeletonGraph) -> np.ndarray:
    """Symmetric normalization with self-loops of a connected graph."""
    a = np.zeros((g.vertex_count, g.vertex_count))
    for (u, v) in g.edges:
        a[u, v] = a[v, u] = 1.0
    _check_connected(a)
    a_hat = a + np.eye(g.vertex_count)
    d = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]


def _check_connected(a: np.ndarray):
    n = a.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in np.nonzero(a[u])[0]:
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    if not seen.all():
        missing = np.nonzero(~seen)[0].tolist()
        raise TopologyError(f"graph is disconnected; unreachable vertices {missing}")


@dataclass(frozen=True)
class CoarseningMap:
    """Partition of fine vertices into one group per coarse vertex."""

    fine_vertex_count: int
    groups: tuple  # tuple of tuples of fine vertex ids

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        seen = set()
        for g in self.groups:
            if not g:
                raise TopologyError("empty coarsening group")
            for j in g:
                if not 0 <= j < self.fine_vertex_count:
                    raise TopologyError(f"group member {j} out of range")
                if j in seen:
                    raise TopologyError(f"fine vertex {j} appears in two groups")
                seen.add(j)
        if len(seen) != self.fine_vertex_count:
            missing = sorted(set(range(self.fine_vertex_count)) - seen)
            raise TopologyError(f"fine vertices {missing} missing from partition")

    @property
    def coarse_vertex_count(self) -> int:
        return len(self.groups)

    def pooling_matrix(self) -> np.ndarray:
        """P[c, f] = 1/|group c| for f in group c, so pooling is x @ P.T."""
        p = np.zeros((self.coarse_vertex_count, self.fine_vertex_count))
        for c, g in enumerate(self.groups):
            p[c, list(g)] = 1.0 / len(g)
        return p

    def expansion_matrix(self) -> np.ndarray:
        """E[f, c] = 1 for f in group c (unscaled copy back to fine)."""
        e = np.zeros((self.fine_vertex_count, self.coarse_vertex_count))
        for c, g in enumerate(self.groups):
            e[list(g), c] = 1.0
        return e


def compose_maps(first: CoarseningMap, second: CoarseningMap) -> CoarseningMap:
    """Chain two coarsenings into one fine -> coarsest partition."""
    if second.fine_vertex_count != first.coarse_vertex_count:
        raise TopologyError(
            f"cannot compose maps: {first.coarse_vertex_count} coarse vertices "
            f"vs {second.fine_vertex_count} fine vertices"
        )
    groups = []
    for g in second.groups:
        merged = []
        for mid in g:
            merged.extend(first.groups[mid])
        groups.append(tuple(sorted(merged)))
    return CoarseningMap(first.fine_vertex_count, tuple(groups))


def coarsen_features(x: T.Tensor, m: CoarseningMap) -> T.Tensor:
    """Average each group of fine vertices into one coarse vertex.

    The backward pass distributes the incoming gradient uniformly over
    the group members (scaled by 1/|group|).
    """
    if x.shape[-1] != m.fine_vertex_count:
        raise T.ShapeError(
            f"coarsen_features: input has {x.shape[-1]} vertices, "
            f"map expects {m.fine_vertex_count}"
        )
    return T.graph_aggregate(x, m.pooling_matrix())


def expand_features(x: T.Tensor, m: CoarseningMap) -> T.Tensor:
    """Copy each coarse vertex's feature back onto its fine members."""
    if x.shape[-1] != m.coarse_vertex_count:
        raise T.ShapeError(
            f"expand_features: input has {x.shape[-1]} vertices, "
            f"map expects {m.coarse_vertex_count}"
        )
    return T.graph_aggregate(x, m.expansion_matrix())


def quotient_graph(g: SkeletonGraph, m: CoarseningMap) -> SkeletonGraph:
    """Coarse vertices are connected iff any of their members were."""
    member_of = {}
    for c, grp in enumerate(m.groups):
        for j in grp:
            member_of[j] = c
    edges = set()
    for (u, v) in g.edges:
        cu, cv = member_of[u], member_of[v]
        if cu != cv:
            edges.add((min(cu, cv), max(cu, cv)))
    return SkeletonGraph(m.coarse_vertex_count, tuple(sorted(edges)))


@dataclass(frozen=True)
class ScalePyramid:
    """Ordered fine-to-coarse scales with the maps between neighbours."""

    scales: tuple  # SkeletonGraph, finest first
    maps: tuple    # CoarseningMap between consecutive scales

    def __post_init__(self):
        if len(self.maps) != len(self.scales) - 1:
            raise ConfigurationError("pyramid needs one map per consecutive scale pair")
        counts = [s.vertex_count for s in self.scales]
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise ConfigurationError(f"vertex counts must strictly decrease, got {counts}")
        for i, m in enumerate(self.maps):
            if (m.fine_vertex_count != counts[i]
                    or m.coarse_vertex_count != counts[i + 1]):
                raise ConfigurationError(
                    f"map {i} connects {m.fine_vertex_count}->{m.coarse_vertex_count}, "
                    f"expected {counts[i]}->{counts[i + 1]}"
                )

    def map_from_finest(self, scale_index: int) -> CoarseningMap | None:
        """Composed partition of the finest scale down to ``scale_index``
        (None for the finest scale itself)."""
        if scale_index == 0:
            return None
        m = self.maps[0]
        for nxt in self.maps[1:scale_index]:
            m = compose_maps(m, nxt)
        return m


# ---------------------------------------------------------------------------
# built-in skeletons and grouping tables

JOINT_NAMES_16 = (
    "root", "spine", "neck", "head",
    "lshoulder", "lelbow", "lhand",
    "rshoulder", "relbow", "rhand",
    "lhip", "lknee", "lfoot",
    "rhip", "rknee", "rfoot",
)

EDGES_16 = (
    (0, 1), (1, 2), (2, 3),
    (2, 4), (4, 5), (5, 6),
    (2, 7), (7, 8), (8, 9),
    (0, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15),
)

JOINT_NAMES_21 = (
    "root", "spine", "chest", "neck", "head",
    "lshoulder", "lelbow", "lwrist", "lhand",
    "rshoulder", "relbow", "rwrist", "rhand",
    "lhip", "lknee", "lankle", "lfoot",
    "rhip", "rknee", "rankle", "rfoot",
)

EDGES_21 = (
    (0, 1), (1, 2), (2, 3), (3, 4),
    (2, 5), (5, 6), (6, 7), (7, 8),
    (2, 9), (9, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
)

# fine -> 10 coarse vertices
GROUPS_16_TO_10 = (
    (0, 1),      # root+spine
    (2, 3),      # neck+head
    (4,),        # lshoulder
    (5, 6),      # lelbow+lhand
    (7,),        # rshoulder
    (8, 9),      # relbow+rhand
    (10,),       # lhip
    (11, 12),    # lknee+lfoot
    (13,),       # rhip
    (14, 15),    # rknee+rfoot
)

GROUPS_21_TO_10 = (
    (0, 1, 2),     # torso column
    (3, 4),        # neck+head
    (5,),          # lshoulder
    (6, 7, 8),     # left arm
    (9,),          # rshoulder
    (10, 11, 12),  # right arm
    (13, 14),      # left upper leg
    (15, 16),      # left lower leg
    (17, 18),      # right upper leg
    (19, 20),      # right lower leg
)

# the 10-vertex layouts above share this 10 -> 5 merge
GROUPS_10_TO_5 = (
    (0, 1),   # torso + head chain
    (2, 3),   # left arm
    (4, 5),   # right arm
    (6, 7),   # left leg
    (8, 9),   # right leg
)

# upper limbs / lower limbs / torso, for the four-scale ablation
GROUPS_5_TO_3 = (
    (0,),
    (1, 2),
    (3, 4),
)

MAX_SCALES = 4


def default_pyramid(joint_count: int, num_scales: int = 3) -> ScalePyramid:
    """Built-in coarsening pyramid for the 16- or 21-joint skeletons.

    ``num_scales=3`` gives 16->10->5 (or 21->10->5); ``num_scales=4``
    appends the 3-vertex body-part scale.
    """
    if joint_count == 16:
        base = SkeletonGraph(16, EDGES_16)
        tables = [GROUPS_16_TO_10, GROUPS_10_TO_5, GROUPS_5_TO_3]
    elif joint_count == 21:
        base = SkeletonGraph(21, EDGES_21)
        tables = [GROUPS_21_TO_10, GROUPS_10_TO_5, GROUPS_5_TO_3]
    else:
        raise ConfigurationError(f"unsupported joint count {joint_count} (expected 16 or 21)")
    if not 1 <= num_scales <= MAX_SCALES:
        raise ConfigurationError(f"num_scales must be 1..{MAX_SCALES}, got {num_scales}")
    return pyramid_from_tables(base, tables[: num_scales - 1])


def pyramid_from_tables(base: SkeletonGraph, tables) -> ScalePyramid:
    """Build a pyramid by repeatedly applying grouping tables to ``base``."""
    scales = [base]
    maps = []
    for groups in tables:
        m = CoarseningMap(scales[-1].vertex_count, tuple(groups))
        maps.append(m)
        scales.append(quotient_graph(scales[-1], m))
    return ScalePyramid(tuple(scales), tuple(maps))


def pyramid_tables(pyramid: ScalePyramid, joint_names=None) -> dict:
    """Human-readable description of a pyramid's grouping tables."""
    out = {"vertex_counts": [s.vertex_count for s in pyramid.scales], "levels": []}
    for i, m in enumerate(pyramid.maps):
        level = {
            "from": m.fine_vertex_count,
            "to": m.coarse_vertex_count,
            "groups": [list(g) for g in m.groups],
        }
        if i == 0 and joint_names is not None:
            level["group_names"] = [
                "+".join(joint_names[j] for j in g) for g in m.groups
            ]
        out["levels"].append(level)
    return out
