"""Domain types for computation graphs, device clusters, and pipeline strategies.

A strategy partitions the operators of a computation graph into a DAG of
pipeline stages, assigns devices and a micro-batch size to each stage, and
attaches a static forward/backward task schedule. ``validate_strategy``
checks the structural validity conditions (partition/convexity, induced
stage edges, device disjointness, schedule ordering).
"""

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class GraphCycleError(ValueError):
    """Raised when an operation requires an acyclic graph but found a cycle."""


@dataclass(frozen=True)
class CostCurve:
    """Execution-time curve: micro-batch size (samples) -> milliseconds.

    Two kinds:
      * ``affine``: ``a + b * n`` with fixed overhead ``a`` and per-sample
        slope ``b``.
      * ``table``: piecewise-linear interpolation between profiled points;
        extrapolation continues the first/last segment slope (clamped at 0).
    """

    kind: str
    a: float = 0.0
    b: float = 0.0
    points: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind == "affine":
            if self.a < 0 or self.b < 0:
                raise ValueError("affine cost curve requires a >= 0 and b >= 0")
        elif self.kind == "table":
            if not self.points:
                raise ValueError("table cost curve requires at least one point")
            keys = [k for k, _ in self.points]
            vals = [v for _, v in self.points]
            if any(k <= 0 for k in keys):
                raise ValueError("table keys must be positive micro-batch sizes")
            if any(v < 0 for v in vals):
                raise ValueError("table values must be nonnegative")
            if keys != sorted(keys) or len(set(keys)) != len(keys):
                raise ValueError("table keys must be strictly increasing")
        else:
            raise ValueError(f"unknown cost curve kind: {self.kind!r}")

    @staticmethod
    def affine(a: float, b: float) -> "CostCurve":
        return CostCurve(kind="affine", a=float(a), b=float(b))

    @staticmethod
    def table(points: Mapping[float, float]) -> "CostCurve":
        items = tuple(sorted((float(k), float(v)) for k, v in points.items()))
        return CostCurve(kind="table", points=items)

    @staticmethod
    def zero() -> "CostCurve":
        return CostCurve.affine(0.0, 0.0)

    def evaluate(self, n: float) -> float:
        """Milliseconds to process ``n`` samples in one task."""
        if n < 0:
            raise ValueError("micro-batch size must be nonnegative")
        if n == 0:
            return 0.0
        if self.kind == "affine":
            return self.a + self.b * n
        pts = self.points
        if len(pts) == 1:
            k, v = pts[0]
            # Single profiled point: scale proportionally through the origin.
            return v * n / k
        if n <= pts[0][0]:
            (k0, v0), (k1, v1) = pts[0], pts[1]
        elif n >= pts[-1][0]:
            (k0, v0), (k1, v1) = pts[-2], pts[-1]
        else:
            lo, hi = 0, len(pts) - 1
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if pts[mid][0] <= n:
                    lo = mid
                else:
                    hi = mid
            (k0, v0), (k1, v1) = pts[lo], pts[hi]
        slope = (v1 - v0) / (k1 - k0)
        return max(0.0, v0 + slope * (n - k0))

    def scaled(self, factor: float) -> "CostCurve":
        if self.kind == "affine":
            return CostCurve.affine(self.a * factor, self.b * factor)
        return CostCurve(kind="table", points=tuple((k, v * factor) for k, v in self.points))


@dataclass(frozen=True)
class Operator:
    """A cost-profiled node of the computation graph."""

    id: int
    name: str
    param_bytes: float = 0.0
    act_bytes_per_sample: float = 0.0
    out_bytes_per_sample: float = 0.0
    fwd_cost: CostCurve = field(default_factory=CostCurve.zero)
    bwd_cost: CostCurve = field(default_factory=CostCurve.zero)

    def __post_init__(self):
        if self.param_bytes < 0 or self.act_bytes_per_sample < 0 or self.out_bytes_per_sample < 0:
            raise ValueError(f"operator {self.id}: byte quantities must be nonnegative")


class ComputationGraph:
    """Immutable DAG of operators."""

    def __init__(self, ops: Iterable[Operator], edges: Iterable[tuple[int, int]]):
        ops = tuple(sorted(ops, key=lambda o: o.id))
        ids = [o.id for o in ops]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate operator ids")
        self.ops: tuple[Operator, ...] = ops
        self.by_id: dict[int, Operator] = {o.id: o for o in ops}
        edge_set = frozenset((int(u), int(v)) for u, v in edges)
        for u, v in edge_set:
            if u not in self.by_id or v not in self.by_id:
                raise ValueError(f"edge ({u}, {v}) references unknown operator")
            if u == v:
                raise ValueError(f"self-loop on operator {u}")
        self.edges: frozenset[tuple[int, int]] = edge_set
        self._succs: dict[int, tuple[int, ...]] = {o.id: () for o in ops}
        self._preds: dict[int, tuple[int, ...]] = {o.id: () for o in ops}
        succs: dict[int, list[int]] = {o.id: [] for o in ops}
        preds: dict[int, list[int]] = {o.id: [] for o in ops}
        for u, v in sorted(edge_set):
            succs[u].append(v)
            preds[v].append(u)
        self._succs = {k: tuple(v) for k, v in succs.items()}
        self._preds = {k: tuple(v) for k, v in preds.items()}
        self.topo_order: tuple[int, ...] = self._toposort()

    def _toposort(self) -> tuple[int, ...]:
        indeg = {o.id: len(self._preds[o.id]) for o in self.ops}
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order: list[int] = []
        import heapq

        heapq.heapify(ready)
        while ready:
            u = heapq.heappop(ready)
            order.append(u)
            for v in self._succs[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, v)
        if len(order) != len(self.ops):
            raise GraphCycleError("computation graph contains a cycle")
        return tuple(order)

    def successors(self, op_id: int) -> tuple[int, ...]:
        return self._succs[op_id]

    def predecessors(self, op_id: int) -> tuple[int, ...]:
        return self._preds[op_id]

    @property
    def op_ids(self) -> frozenset[int]:
        return frozenset(self.by_id)

    def source_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.topo_order if not self._preds[i])

    def sink_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.topo_order if not self._succs[i])

    def scaled(self, factor: float) -> "ComputationGraph":
        """Copy with every cost curve multiplied by ``factor``."""
        ops = [
            Operator(
                id=o.id,
                name=o.name,
                param_bytes=o.param_bytes,
                act_bytes_per_sample=o.act_bytes_per_sample,
                out_bytes_per_sample=o.out_bytes_per_sample,
                fwd_cost=o.fwd_cost.scaled(factor),
                bwd_cost=o.bwd_cost.scaled(factor),
            )
            for o in self.ops
        ]
        return ComputationGraph(ops, self.edges)

    def __repr__(self):
        return f"ComputationGraph(ops={len(self.ops)}, edges={len(self.edges)})"


@dataclass(frozen=True)
class DeviceCluster:
    """Homogeneous device pool: per-device memory and two link classes."""

    num_devices: int
    mem_per_device: float
    intra_bw: float
    inter_bw: float
    link_latency: float = 0.0

    def __post_init__(self):
        if self.num_devices < 1:
            raise ValueError("cluster needs at least one device")
        if self.mem_per_device <= 0:
            raise ValueError("per-device memory budget must be positive")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValueError("link bandwidths must be positive")
        if self.link_latency < 0:
            raise ValueError("link latency must be nonnegative")


@dataclass(frozen=True)
class ScheduleConfig:
    """Per-stage schedule triple: in-flight samples, micro-batch size, kFkB k."""

    inflight_samples: int
    micro_batch: int
    k: int

    def __post_init__(self):
        if self.micro_batch < 1 or self.k < 1 or self.inflight_samples < 1:
            raise ValueError("schedule config fields must be >= 1")
        if self.inflight_samples % self.micro_batch != 0:
            raise ValueError("in-flight samples must be a multiple of the micro-batch size")

    @property
    def warmup_microbatches(self) -> int:
        return self.inflight_samples // self.micro_batch


@dataclass(frozen=True)
class Task:
    direction: str  # "fw" or "bw"
    index: int  # micro-batch index within the stage, 0-based

    def __post_init__(self):
        if self.direction not in ("fw", "bw"):
            raise ValueError("task direction must be 'fw' or 'bw'")
        if self.index < 0:
            raise ValueError("task index must be nonnegative")


TaskSchedule = tuple[Task, ...]


@dataclass(frozen=True)
class Stage:
    """One pipeline stage: an operator subset bound to devices and a schedule."""

    id: int
    op_ids: frozenset[int]
    micro_batch: int
    devices: frozenset[int]
    sched_cfg: ScheduleConfig | None = None
    schedule: TaskSchedule | None = None

    def __post_init__(self):
        if not self.op_ids:
            raise ValueError(f"stage {self.id} has no operators")
        if not self.devices:
            raise ValueError(f"stage {self.id} has no devices")
        if self.micro_batch < 1:
            raise ValueError(f"stage {self.id}: micro-batch must be >= 1")

    @property
    def dp_degree(self) -> int:
        return len(self.devices)


class StageGraph:
    """A pipeline strategy: DAG of stages over a mini-batch of B samples."""

    def __init__(self, stages: Iterable[Stage], edges: Iterable[tuple[int, int]], mini_batch: int):
        stages = tuple(sorted(stages, key=lambda s: s.id))
        ids = [s.id for s in stages]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate stage ids")
        if mini_batch < 1:
            raise ValueError("mini-batch must be >= 1")
        self.stages: tuple[Stage, ...] = stages
        self.by_id: dict[int, Stage] = {s.id: s for s in stages}
        self.edges: frozenset[tuple[int, int]] = frozenset((int(a), int(b)) for a, b in edges)
        for a, b in self.edges:
            if a not in self.by_id or b not in self.by_id:
                raise ValueError(f"stage edge ({a}, {b}) references unknown stage")
        self.mini_batch = int(mini_batch)

    def successors(self, stage_id: int) -> tuple[int, ...]:
        return tuple(sorted(b for a, b in self.edges if a == stage_id))

    def predecessors(self, stage_id: int) -> tuple[int, ...]:
        return tuple(sorted(a for a, b in self.edges if b == stage_id))

    def source_stage_ids(self) -> tuple[int, ...]:
        has_pred = {b for _, b in self.edges}
        return tuple(s.id for s in self.stages if s.id not in has_pred)

    def sink_stage_ids(self) -> tuple[int, ...]:
        has_succ = {a for a, _ in self.edges}
        return tuple(s.id for s in self.stages if s.id not in has_succ)

    def topo_order(self) -> tuple[int, ...]:
        indeg = {s.id: 0 for s in self.stages}
        for _, b in self.edges:
            indeg[b] += 1
        import heapq

        ready = [i for i, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order: list[int] = []
        while ready:
            u = heapq.heappop(ready)
            order.append(u)
            for v in self.successors(u):
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, v)
        if len(order) != len(self.stages):
            raise GraphCycleError("stage graph contains a cycle")
        return tuple(order)

    def with_schedules(self, cfgs: Mapping[int, ScheduleConfig], schedules: Mapping[int, TaskSchedule]) -> "StageGraph":
        stages = [
            Stage(
                id=s.id,
                op_ids=s.op_ids,
                micro_batch=s.micro_batch,
                devices=s.devices,
                sched_cfg=cfgs.get(s.id, s.sched_cfg),
                schedule=schedules.get(s.id, s.schedule),
            )
            for s in self.stages
        ]
        return StageGraph(stages, self.edges, self.mini_batch)

    def __repr__(self):
        return f"StageGraph(stages={len(self.stages)}, edges={len(self.edges)}, B={self.mini_batch})"


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    subjects: tuple = ()


ValidationReport = list  # list[Violation]; empty report == valid strategy


def induced_stage_edges(g: ComputationGraph, partition: Sequence[frozenset]) -> set[tuple[int, int]]:
    """Stage edges forced by the computation graph: (i, j) iff some edge crosses block i -> block j."""
    block_of: dict[int, int] = {}
    for idx, block in enumerate(partition):
        for op in block:
            block_of[op] = idx
    out: set[tuple[int, int]] = set()
    for u, v in g.edges:
        bu, bv = block_of.get(u), block_of.get(v)
        if bu is None or bv is None or bu == bv:
            continue
        out.add((bu, bv))
    return out


def _convexity_violated(g: ComputationGraph, block: frozenset) -> bool:
    """True if a directed path leaves ``block`` and re-enters it."""
    outside_frontier = {v for u in block for v in g.successors(u) if v not in block}
    seen = set(outside_frontier)
    queue = list(outside_frontier)
    while queue:
        x = queue.pop()
        for y in g.successors(x):
            if y in block:
                return True
            if y not in seen:
                seen.add(y)
                queue.append(y)
    return False


def _schedule_violations(stage: Stage, mini_batch: int) -> list[Violation]:
    out: list[Violation] = []
    if mini_batch % stage.micro_batch != 0:
        out.append(
            Violation(
                "microbatch-divisibility",
                f"stage {stage.id}: micro-batch {stage.micro_batch} does not divide mini-batch {mini_batch}",
                (stage.id,),
            )
        )
        return out
    if stage.schedule is None:
        return out
    n = mini_batch // stage.micro_batch
    fw_done: set[int] = set()
    fw_order: list[int] = []
    bw_order: list[int] = []
    for task in stage.schedule:
        if task.direction == "fw":
            fw_order.append(task.index)
            fw_done.add(task.index)
        else:
            bw_order.append(task.index)
            if task.index not in fw_done:
                out.append(
                    Violation(
                        "C4",
                        f"stage {stage.id}: bw {task.index} scheduled before its fw",
                        (stage.id, task.index),
                    )
                )
    if fw_order != sorted(fw_order) or fw_order != list(range(len(fw_order))):
        out.append(Violation("C4", f"stage {stage.id}: forward tasks out of order", (stage.id,)))
    if bw_order != sorted(bw_order) or bw_order != list(range(len(bw_order))):
        out.append(Violation("C4", f"stage {stage.id}: backward tasks out of order", (stage.id,)))
    if len(fw_order) != n or len(bw_order) != n:
        out.append(
            Violation(
                "task-count",
                f"stage {stage.id}: expected {n} fw and {n} bw tasks, found {len(fw_order)}/{len(bw_order)}",
                (stage.id,),
            )
        )
    return out


def validate_strategy(g: ComputationGraph, cluster: DeviceCluster | None, s: StageGraph) -> ValidationReport:
    """Check C1 (partition + convexity), C2 (stage edges), C3 (devices), C4 (schedules).

    Violations are data, not errors: the strategy is valid iff the report is empty.
    """
    report: list[Violation] = []

    # C1: op sets partition the graph's op set.
    seen: dict[int, int] = {}
    for stage in s.stages:
        for op in stage.op_ids:
            if op in seen:
                report.append(
                    Violation("C1", f"operator {op} appears in stages {seen[op]} and {stage.id}", (seen[op], stage.id, op))
                )
            seen[op] = stage.id
            if op not in g.by_id:
                report.append(Violation("C1", f"stage {stage.id} references unknown operator {op}", (stage.id, op)))
    missing = g.op_ids - set(seen)
    if missing:
        report.append(Violation("C1", f"operators not covered by any stage: {sorted(missing)}", tuple(sorted(missing))))

    # C1: convexity of each stage's op subgraph.
    for stage in s.stages:
        if _convexity_violated(g, stage.op_ids):
            report.append(Violation("C1", f"stage {stage.id} op set is not convex", (stage.id,)))

    # C2: declared stage edges must cover the induced ones, and stay acyclic.
    partition = [stage.op_ids for stage in s.stages]
    idx_to_id = {i: stage.id for i, stage in enumerate(s.stages)}
    induced = {(idx_to_id[a], idx_to_id[b]) for a, b in induced_stage_edges(g, partition)}
    for edge in sorted(induced - s.edges):
        report.append(Violation("C2", f"missing stage edge {edge} required by a computation edge", edge))
    try:
        s.topo_order()
    except GraphCycleError:
        report.append(Violation("C2", "stage graph contains a cycle", ()))

    # C3: disjoint nonempty device sets within the cluster.
    dev_seen: dict[int, int] = {}
    for stage in s.stages:
        for d in stage.devices:
            if d in dev_seen:
                report.append(Violation("C3", f"device {d} assigned to stages {dev_seen[d]} and {stage.id}", (dev_seen[d], stage.id, d)))
            dev_seen[d] = stage.id
            if cluster is not None and not (0 <= d < cluster.num_devices):
                report.append(Violation("C3", f"device {d} outside cluster of size {cluster.num_devices}", (stage.id, d)))

    # C4 and task counts per stage.
    for stage in s.stages:
        report.extend(_schedule_violations(stage, s.mini_batch))

    return report


def pipeline_depth(s: StageGraph) -> int:
    """Number of stages on the longest directed path of the stage graph."""
    order = s.topo_order()  # raises GraphCycleError on cycles
    depth: dict[int, int] = {}
    for sid in order:
        preds = s.predecessors(sid)
        depth[sid] = 1 + max((depth[p] for p in preds), default=0)
    return max(depth.values(), default=0)
