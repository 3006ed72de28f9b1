"""Producer/consumer relations between compute operators and the dependency checker."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import networkx as nx

from .schedule import K, Operator, Schedule

OpKey = tuple


def op_key(op: Operator, schedule: Schedule) -> OpKey:
    """Identity of a compute op, independent of its position in the schedule."""
    if op.kind.is_llm:
        return (op.kind, op.microbatch, schedule.stage_of(op))
    return (op.kind, op.unit, op.rank)


def producer_keys(op: Operator, schedule: Schedule) -> list[OpKey]:
    """Keys of the compute ops whose outputs ``op`` consumes."""
    kind = op.kind
    if kind is K.LlmFwd:
        m, s = op.microbatch, schedule.stage_of(op)
        if s > 0:
            return [(K.LlmFwd, m, s - 1)]
        if schedule.has_encoder:
            return [(K.EncFwd, schedule.enc_unit_of(m), schedule.encoder_rank_of(m))]
        return []
    if kind is K.LlmBwd:
        m, s = op.microbatch, schedule.stage_of(op)
        keys = [(K.LlmFwd, m, s)]
        if s < schedule.num_stages - 1:
            keys.append((K.LlmBwd, m, s + 1))
        elif schedule.has_generator:
            g = schedule.gen_unit_of(m)
            keys.extend((K.GenBwd, g, q) for q in schedule.generator_ranks)
        return keys
    if kind is K.EncBwd:
        keys = [(K.EncFwd, op.unit, op.rank)]
        keys.extend((K.LlmBwd, m, 0) for m in schedule.enc_microbatches(op.unit, op.rank))
        return keys
    if kind is K.GenFwd:
        last = schedule.num_stages - 1
        return [(K.LlmFwd, m, last) for m in schedule.gen_microbatches(op.unit)]
    if kind is K.GenBwd:
        return [(K.GenFwd, op.unit, op.rank)]
    return []


@dataclass(frozen=True)
class Violation:
    """A data edge that no global execution order can satisfy.

    ``reason`` is ``"order"`` when the edge lies on a cycle formed with the
    per-rank program order, ``"missing-producer"`` when the producer does not
    exist in the schedule, and ``"duplicate"`` when an op identity repeats.
    """

    reason: str
    consumer: Operator
    producer: Operator | None = None
    producer_key: OpKey | None = None

    def __str__(self) -> str:
        if self.reason == "order":
            return f"{self.producer.label()} must precede {self.consumer.label()}"
        if self.reason == "missing-producer":
            return f"{self.consumer.label()} has no producer {self.producer_key}"
        return f"duplicate operator {self.consumer.label()}"


def compute_index(schedule: Schedule) -> tuple[dict[OpKey, Operator], list[Violation]]:
    index: dict[OpKey, Operator] = {}
    duplicates = []
    for op in schedule.ops():
        if not op.is_compute:
            continue
        key = op_key(op, schedule)
        if key in index:
            duplicates.append(Violation("duplicate", op))
        else:
            index[key] = op
    return index, duplicates


def dependency_graph(schedule: Schedule) -> tuple[nx.DiGraph, list[Violation]]:
    """Compute ops with program-order edges and data edges (``data=True``)."""
    index, problems = compute_index(schedule)
    graph = nx.DiGraph()
    for ops in schedule.per_rank:
        prev = None
        for op in ops:
            if not op.is_compute:
                continue
            graph.add_node(op.id, op=op)
            if prev is not None:
                graph.add_edge(prev.id, op.id, data=False)
            prev = op
    for op in schedule.ops():
        if not op.is_compute:
            continue
        for key in producer_keys(op, schedule):
            producer = index.get(key)
            if producer is None:
                problems.append(Violation("missing-producer", op, producer_key=key))
            elif graph.has_edge(producer.id, op.id):
                graph.edges[producer.id, op.id]["data"] = True
            else:
                graph.add_edge(producer.id, op.id, data=True)
    return graph, problems


def verify_dependencies(schedule: Schedule) -> list[Violation]:
    """Data edges that cannot be honoured by any global execution order.

    Returns ``[]`` iff the union of per-rank program order and producer
    edges is acyclic.  Communication ops are ignored; data moved by them is
    modelled directly as producer edges.
    """
    graph, violations = dependency_graph(schedule)
    if nx.is_directed_acyclic_graph(graph):
        return violations
    component = {}
    for i, nodes in enumerate(nx.strongly_connected_components(graph)):
        if len(nodes) > 1:
            for n in nodes:
                component[n] = i
    for u, v, data in graph.edges(data=True):
        if data["data"] and u in component and component.get(v) == component[u]:
            violations.append(Violation(
                "order", graph.nodes[v]["op"], producer=graph.nodes[u]["op"]
            ))
    return violations


def check_completeness(schedule: Schedule) -> list[str]:
    """Missing or repeated compute ops relative to the schedule's layout."""
    expected: Counter = Counter()
    P, V, M = schedule.P, schedule.V, schedule.M
    for r in range(P):
        for c in range(V):
            for m in range(M):
                expected[(K.LlmFwd, m, c * P + r)] += 1
                expected[(K.LlmBwd, m, c * P + r)] += 1
    for u in range(schedule.num_enc_units):
        for r in schedule.encoder_ranks:
            if schedule.enc_microbatches(u, r):
                expected[(K.EncFwd, u, r)] += 1
                expected[(K.EncBwd, u, r)] += 1
    for g in range(schedule.num_gen_units):
        for q in schedule.generator_ranks:
            expected[(K.GenFwd, g, q)] += 1
            expected[(K.GenBwd, g, q)] += 1
    actual = Counter(op_key(op, schedule) for op in schedule.ops() if op.is_compute)
    problems = []
    for key in sorted(set(expected) | set(actual), key=repr):
        if expected[key] != actual[key]:
            problems.append(f"{key}: expected {expected[key]}, found {actual[key]}")
    return problems
