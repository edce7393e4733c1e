"""Analytic cost model: per-stage time-per-sample, communication, memory.

TPS of a stage processing micro-batches of b samples on d devices:

    TPS = [ sum_ops(fwd(b/d) + bwd(b/d)) + comm_in(b) + comm_out(b) + dp_sync(d) ] / b

``comm_in`` is the activation traffic received on the stage's in-boundary
edges and ``comm_out`` the matching gradient traffic sent back on the same
edges; both are charged to the consumer stage, so each computation edge has
exactly one owner. ``dp_sync`` is a ring-allreduce gradient synchronization
term, paid once per micro-batch.
"""

from dataclasses import dataclass
from typing import Sequence

from .model import DeviceCluster, Operator


class IndivisibleMicroBatchError(ValueError):
    pass


def comm_time(bytes_per_sample: float, batch: int, bandwidth: float, latency: float = 0.0) -> float:
    """Transfer time in ms for one micro-batch over a link."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return latency + (bytes_per_sample * batch) / bandwidth


def dp_sync_time(param_bytes: float, dp_degree: int, intra_bw: float) -> float:
    """Ring-allreduce time for the stage's gradients across its replicas."""
    if dp_degree <= 1:
        return 0.0
    return 2.0 * (dp_degree - 1) / dp_degree * param_bytes / intra_bw


@dataclass(frozen=True)
class StageCostInput:
    """Everything needed to price one stage."""

    ops: tuple[Operator, ...]
    micro_batch: int
    dp_degree: int
    comm_in_bytes_per_sample: float
    comm_out_bytes_per_sample: float
    cluster: DeviceCluster

    def __post_init__(self):
        if self.micro_batch < 1:
            raise ValueError("micro-batch must be >= 1")
        if self.dp_degree < 1:
            raise ValueError("data-parallel degree must be >= 1")


def estimate_tps(inp: StageCostInput) -> float:
    """Milliseconds per sample for the stage, including boundary communication."""
    b, d = inp.micro_batch, inp.dp_degree
    if b % d != 0:
        raise IndivisibleMicroBatchError(f"micro-batch {b} not divisible by dp degree {d}")
    per_device = b // d
    compute = sum(op.fwd_cost.evaluate(per_device) + op.bwd_cost.evaluate(per_device) for op in inp.ops)
    comm = 0.0
    if inp.comm_in_bytes_per_sample > 0:
        comm += comm_time(inp.comm_in_bytes_per_sample, b, inp.cluster.inter_bw, inp.cluster.link_latency)
    if inp.comm_out_bytes_per_sample > 0:
        comm += comm_time(inp.comm_out_bytes_per_sample, b, inp.cluster.inter_bw, inp.cluster.link_latency)
    params = sum(op.param_bytes for op in inp.ops)
    sync = dp_sync_time(params, d, inp.cluster.intra_bw)
    return (compute + comm + sync) / b


@dataclass(frozen=True)
class MemoryBreakdown:
    weight_bytes: float
    activation_bytes: float

    @property
    def total(self) -> float:
        return self.weight_bytes + self.activation_bytes


DEFAULT_WEIGHT_MULTIPLIER = 2.0  # parameters + gradients


def stage_memory(
    ops: Sequence[Operator],
    dp_degree: int,
    inflight_samples: int,
    weight_multiplier: float = DEFAULT_WEIGHT_MULTIPLIER,
) -> MemoryBreakdown:
    """Per-device memory for a stage holding ``inflight_samples`` activations."""
    if dp_degree < 1:
        raise ValueError("data-parallel degree must be >= 1")
    if inflight_samples < 0:
        raise ValueError("in-flight samples must be nonnegative")
    params = sum(op.param_bytes for op in ops)
    act = sum(op.act_bytes_per_sample for op in ops)
    return MemoryBreakdown(
        weight_bytes=params * weight_multiplier / dp_degree,
        activation_bytes=act * inflight_samples / dp_degree,
    )
