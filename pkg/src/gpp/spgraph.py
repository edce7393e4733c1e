"""Series-parallel recognition, normalization, and decomposition.

``normalize`` rewrites a DAG so it has a unique source and sink and so that
every fan-out/fan-in point is a zero-cost virtual junction; parallel branches
then never share a real operator. ``decompose`` reduces the normalized graph
to a binary series-parallel tree (series and parallel reductions on the edge
multigraph) and fails with a witness when the graph is not two-terminal
series-parallel.
"""

import itertools
from dataclasses import dataclass

from .model import ComputationGraph, CostCurve, GraphCycleError, Operator


class NotSeriesParallelError(ValueError):
    """Graph is not two-terminal series-parallel; carries an irreducible witness."""

    def __init__(self, witness_edges: frozenset):
        self.witness_edges = witness_edges
        super().__init__(f"graph is not series-parallel; irreducible edges: {sorted(witness_edges)}")


@dataclass(frozen=True)
class NormalizedGraph:
    """A computation graph extended with virtual junction operators.

    ``virtual_ids`` tags the inserted zero-cost ops. ``effective_out_bytes``
    resolves per-edge traffic through virtual relays back to real producers,
    since virtual ops themselves carry zero bytes.
    """

    graph: ComputationGraph
    virtual_ids: frozenset[int]
    original: ComputationGraph

    def is_virtual(self, op_id: int) -> bool:
        return op_id in self.virtual_ids

    @property
    def effective_out_bytes(self) -> dict[int, float]:
        cached = getattr(self, "_eff_bytes", None)
        if cached is not None:
            return cached
        eff: dict[int, float] = {}
        g = self.graph
        for op_id in g.topo_order:
            op = g.by_id[op_id]
            if op_id not in self.virtual_ids:
                eff[op_id] = op.out_bytes_per_sample
            else:
                preds = g.predecessors(op_id)
                eff[op_id] = sum(eff[p] for p in preds)
        object.__setattr__(self, "_eff_bytes", eff)
        return eff

    def edge_bytes(self, u: int, v: int) -> float:
        """Bytes per sample carried by edge (u, v), resolved past virtual relays."""
        return self.effective_out_bytes[u]


def _virtual_op(op_id: int, name: str) -> Operator:
    return Operator(
        id=op_id,
        name=name,
        param_bytes=0.0,
        act_bytes_per_sample=0.0,
        out_bytes_per_sample=0.0,
        fwd_cost=CostCurve.zero(),
        bwd_cost=CostCurve.zero(),
    )


def normalize(g: "ComputationGraph | NormalizedGraph") -> NormalizedGraph:
    """Insert virtual junctions so the graph is two-terminal with virtual fan points.

    Idempotent: virtual ops are allowed to branch/merge, so a normalized graph
    passes through unchanged.
    """
    if isinstance(g, NormalizedGraph):
        original = g.original
        virtual = set(g.virtual_ids)
        g = g.graph
    else:
        original = g
        virtual = set()

    if not g.ops:
        raise ValueError("cannot normalize an empty graph")
    g.topo_order  # raises on cycles

    ops: dict[int, Operator] = dict(g.by_id)
    edges: set[tuple[int, int]] = set(g.edges)
    next_id = itertools.count(max(ops) + 1)

    def add_virtual(name: str) -> int:
        vid = next(next_id)
        ops[vid] = _virtual_op(vid, name)
        virtual.add(vid)
        return vid

    sources = sorted(i for i in ops if not any(e[1] == i for e in edges))
    if len(sources) > 1:
        vs = add_virtual("source")
        for s in sources:
            edges.add((vs, s))
    sinks = sorted(i for i in ops if not any(e[0] == i for e in edges))
    if len(sinks) > 1:
        vt = add_virtual("sink")
        for t in sinks:
            edges.add((t, vt))

    # Real fan-out points get a virtual successor junction.
    for u in sorted(ops):
        if u in virtual:
            continue
        outs = sorted(v for (a, v) in edges if a == u)
        if len(outs) >= 2:
            j = add_virtual(f"fanout:{ops[u].name}")
            for v in outs:
                edges.discard((u, v))
                edges.add((j, v))
            edges.add((u, j))

    # Real fan-in points get a virtual predecessor junction.
    for w in sorted(ops):
        if w in virtual:
            continue
        ins = sorted(u for (u, b) in edges if b == w)
        if len(ins) >= 2:
            j = add_virtual(f"fanin:{ops[w].name}")
            for u in ins:
                edges.discard((u, w))
                edges.add((u, j))
            edges.add((j, w))

    return NormalizedGraph(graph=ComputationGraph(ops.values(), edges), virtual_ids=frozenset(virtual), original=original)


# --- SP tree -----------------------------------------------------------------


@dataclass(frozen=True)
class SPLeaf:
    op: int

    @property
    def source_op(self) -> int:
        return self.op

    @property
    def sink_op(self) -> int:
        return self.op

    @property
    def ops(self) -> frozenset[int]:
        return frozenset((self.op,))


@dataclass(frozen=True)
class SPSeries:
    """Series composition; the junction op is the left child's sink (owned by left)."""

    left: "SPTree"
    right: "SPTree"
    junction: int

    @property
    def source_op(self) -> int:
        return self.left.source_op

    @property
    def sink_op(self) -> int:
        return self.right.sink_op

    @property
    def ops(self) -> frozenset[int]:
        cached = getattr(self, "_ops", None)
        if cached is None:
            cached = self.left.ops | self.right.ops
            object.__setattr__(self, "_ops", cached)
        return cached


@dataclass(frozen=True)
class SPParallel:
    """Parallel bundle; ``source``/``sink`` are the shared junction ops, owned outside.

    ``direct_edges`` counts source->sink edges that bypass every branch
    (skip connections).
    """

    children: tuple["SPTree", ...]
    source: int
    sink: int
    direct_edges: int = 0

    @property
    def left(self) -> "SPTree":
        return self.children[0]

    @property
    def right(self) -> "SPTree":
        if len(self.children) == 2:
            return self.children[1]
        return SPParallel(children=self.children[1:], source=self.source, sink=self.sink, direct_edges=0)

    @property
    def source_op(self) -> int:
        return self.source

    @property
    def sink_op(self) -> int:
        return self.sink

    @property
    def ops(self) -> frozenset[int]:
        cached = getattr(self, "_ops", None)
        if cached is None:
            cached = frozenset().union(*(c.ops for c in self.children)) if self.children else frozenset()
            object.__setattr__(self, "_ops", cached)
        return cached


SPTree = SPLeaf | SPSeries | SPParallel


def _chain_to_tree(items: list) -> SPTree:
    """Right-deep series tree over a list of already-built subtrees."""
    if len(items) == 1:
        return items[0]
    head = items[0]
    rest = _chain_to_tree(items[1:])
    return SPSeries(left=head, right=rest, junction=head.sink_op)


# Internal reduction payloads: a "sequence" is the list of items strictly between
# the endpoints of a multigraph edge; items are op ids or _Bundle markers.


@dataclass
class _Bundle:
    branches: list  # list of sequences (each a list of items), nonempty ones
    direct: int  # number of empty branches (direct source->sink edges)
    source: int
    sink: int


def _branch_key(seq: list) -> tuple:
    return tuple(_flatten_ids(seq))


def _flatten_ids(seq: list) -> list[int]:
    out: list[int] = []
    for item in seq:
        if isinstance(item, _Bundle):
            for br in item.branches:
                out.extend(_flatten_ids(br))
        else:
            out.append(item)
    return out


def decompose(ng: NormalizedGraph) -> SPTree:
    """Series-parallel decomposition of a normalized graph.

    Raises NotSeriesParallelError (with the irreducible edge set as witness)
    when the graph is not two-terminal series-parallel.
    """
    g = ng.graph
    ids = list(g.topo_order)
    if len(ids) == 1:
        return SPLeaf(ids[0])
    source, sink = ids[0], ids[-1]
    if g.predecessors(source) or g.successors(sink):
        raise ValueError("normalized graph must have unique source and sink")

    # Edge multigraph with payload sequences.
    edges: dict[int, tuple[int, int, list]] = {}
    out_edges: dict[int, set[int]] = {i: set() for i in ids}
    in_edges: dict[int, set[int]] = {i: set() for i in ids}
    eid = itertools.count()
    for u, v in sorted(g.edges):
        k = next(eid)
        edges[k] = (u, v, [])
        out_edges[u].add(k)
        in_edges[v].add(k)

    changed = True
    while changed:
        changed = False
        # Series reductions: absorb nodes with a single in and out edge.
        for v in sorted(ids):
            if v == source or v == sink or v not in in_edges:
                continue
            if len(in_edges.get(v, ())) == 1 and len(out_edges.get(v, ())) == 1:
                e1 = next(iter(in_edges[v]))
                e2 = next(iter(out_edges[v]))
                if e1 == e2:
                    continue
                u, _, p1 = edges[e1]
                _, w, p2 = edges[e2]
                k = next(eid)
                edges[k] = (u, w, p1 + [v] + p2)
                out_edges[u].discard(e1)
                out_edges[u].add(k)
                in_edges[w].discard(e2)
                in_edges[w].add(k)
                del edges[e1], edges[e2]
                del in_edges[v], out_edges[v]
                changed = True
        # Parallel reductions: merge all multi-edges between the same endpoints.
        by_pair: dict[tuple[int, int], list[int]] = {}
        for k, (u, v, _) in edges.items():
            by_pair.setdefault((u, v), []).append(k)
        for (u, v), ks in sorted(by_pair.items()):
            if len(ks) < 2:
                continue
            branches = []
            direct = 0
            for k in sorted(ks):
                payload = edges[k][2]
                if len(payload) == 1 and isinstance(payload[0], _Bundle):
                    inner = payload[0]
                    # Flatten nested bundles sharing the same terminals.
                    branches.extend(inner.branches)
                    direct += inner.direct
                elif not payload:
                    direct += 1
                else:
                    branches.append(payload)
                out_edges[u].discard(k)
                in_edges[v].discard(k)
                del edges[k]
            k = next(eid)
            branches.sort(key=_branch_key)
            edges[k] = (u, v, [_Bundle(branches=branches, direct=direct, source=u, sink=v)])
            out_edges[u].add(k)
            in_edges[v].add(k)
            changed = True

    if len(edges) != 1:
        witness = frozenset((u, v) for (u, v, _) in edges.values())
        raise NotSeriesParallelError(witness)

    (_, _, payload) = next(iter(edges.values()))

    def build_item(item) -> SPTree:
        if isinstance(item, _Bundle):
            children = tuple(_chain_to_tree([build_item(x) for x in br]) for br in item.branches)
            return SPParallel(children=children, source=item.source, sink=item.sink, direct_edges=item.direct)
        return SPLeaf(item)

    items = [SPLeaf(source)] + [build_item(x) for x in payload] + [SPLeaf(sink)]
    return _chain_to_tree(items)


def flatten_series(node: SPTree) -> list[SPTree]:
    """Maximal series chain at this node (right-deep nesting flattened)."""
    if not isinstance(node, SPSeries):
        return [node]
    return flatten_series(node.left) + flatten_series(node.right)


def flatten_parallel(node: SPTree) -> list[SPTree]:
    """Maximal parallel bundle at this node."""
    if not isinstance(node, SPParallel):
        return [node]
    return list(node.children)


def series_splits(node: SPTree) -> list[tuple[frozenset[int], frozenset[int], int]]:
    """All associativity cuts of the maximal series chain at ``node``.

    Each cut yields (left op set, right op set, junction op id), the junction
    being the last op of the left part.
    """
    if not isinstance(node, SPSeries):
        raise ValueError("series_splits requires a series node")
    units = flatten_series(node)
    out = []
    for p in range(1, len(units)):
        left = frozenset().union(*(u.ops for u in units[:p]))
        right = frozenset().union(*(u.ops for u in units[p:]))
        junction = units[p - 1].sink_op
        out.append((left, right, junction))
    return out


def parallel_splits(node: SPTree) -> list[tuple[frozenset[int], frozenset[int]]]:
    """Bipartitions of the maximal parallel bundle: one-vs-rest, plus a balanced cut."""
    if not isinstance(node, SPParallel):
        raise ValueError("parallel_splits requires a parallel node")
    branches = flatten_parallel(node)
    if len(branches) < 2:
        raise ValueError("parallel node has fewer than two branches")
    ops = [b.ops for b in branches]
    out: list[tuple[frozenset[int], frozenset[int]]] = []
    seen = set()
    for i in range(len(branches)):
        one = ops[i]
        rest = frozenset().union(*(o for j, o in enumerate(ops) if j != i))
        key = (one, rest)
        if key not in seen:
            seen.add(key)
            out.append((one, rest))
    if len(branches) > 3:
        mid = len(branches) // 2
        left = frozenset().union(*ops[:mid])
        right = frozenset().union(*ops[mid:])
        if (left, right) not in seen and (right, left) not in seen:
            out.append((left, right))
    return out


def rebuild(tree: SPTree) -> tuple[frozenset[int], frozenset[tuple[int, int]]]:
    """Reconstruct (op set, edge set) from a decomposition tree."""
    ops: set[int] = set()
    edges: set[tuple[int, int]] = set()

    def walk(node: SPTree) -> tuple[int, int]:
        # Returns (source op, sink op) of the subgraph.
        if isinstance(node, SPLeaf):
            ops.add(node.op)
            return node.op, node.op
        if isinstance(node, SPSeries):
            ls, lk = walk(node.left)
            rs, rk = walk(node.right)
            if lk != rs:
                # Equal means the neighbor is a bundle terminal: the bundle's
                # own edges already provide the connection.
                edges.add((lk, rs))
            return ls, rk
        src, snk = node.source, node.sink
        for child in node.children:
            cs, ck = walk(child)
            edges.add((src, cs))
            edges.add((ck, snk))
        for _ in range(node.direct_edges):
            edges.add((src, snk))
        return src, snk

    walk(tree)
    return frozenset(ops), frozenset(edges)


def linearize(g: ComputationGraph) -> list[int]:
    """Deterministic topological order: smallest op id among ready ops first."""
    return list(g.topo_order)
