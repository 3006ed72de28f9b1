"""Communication operator insertion and static deadlock analysis.

Every cross-rank data edge becomes a pair of pieces: a sending piece placed
right after the producer and a receiving piece placed right before the
consumer.  LLM stage-to-stage traffic uses ``Send``/``Recv``; traffic between
the LLM and the encoder/generator uses ``Gather``/``Scatter`` pieces, one per
non-root rank.  The root's own share is a single local piece (``peer ==
rank``) that only marks the hand-off.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import networkx as nx
import numpy as np

from .dependencies import compute_index, producer_keys, verify_dependencies
from .extensions import fsdp_group, fsdp_key
from .schedule import COMM_KINDS, K, Operator, Schedule, ScheduleError

# payload -> (collective kind, root is the last LLM rank)
_COLLECTIVES = {
    "emb": (K.Gather, False),
    "emb_grad": (K.Scatter, False),
    "gen_in": (K.Scatter, True),
    "gen_grad": (K.Gather, True),
}
_PAYLOAD_ORDER = {"act": 0, "grad": 1, "cp": 2, "emb": 3, "emb_grad": 4, "gen_in": 5, "gen_grad": 6}


@dataclass(frozen=True)
class PayloadSizes:
    """Bytes per microbatch moved for each payload kind."""

    act: float = 1
    grad: float = 1
    emb: float = 1
    emb_grad: float = 1
    gen_in: float = 1
    gen_grad: float = 1

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value <= 0:
                raise ValueError(f"payload size {name} must be positive, got {value}")

    def of(self, payload: str) -> float:
        return getattr(self, payload)


@dataclass(frozen=True)
class CommEdge:
    producer: int
    consumer: int
    payload: str
    nbytes: float


def _frac(value, shards: int):
    if isinstance(value, float):
        return value / shards
    return Fraction(value) / shards if shards != 1 else value


def collective_root(payload: str, schedule: Schedule) -> int:
    return schedule.P - 1 if _COLLECTIVES[payload][1] else 0


def comm_role(op: Operator, schedule: Schedule) -> str:
    """``send``, ``recv``, ``self`` (local hand-off) or ``local`` (CpConvert)."""
    if op.kind is K.Send:
        return "send"
    if op.kind is K.Recv:
        return "recv"
    if op.kind is K.CpConvert:
        return "local"
    if op.kind in (K.Gather, K.Scatter):
        if op.peer == op.rank:
            return "self"
        root = collective_root(op.payload, schedule)
        if op.kind is K.Gather:
            return "recv" if op.rank == root else "send"
        return "send" if op.rank == root else "recv"
    raise ValueError(f"{op.label()} is not a communication op")


def match_key(op: Operator, schedule: Schedule) -> tuple:
    """Key shared by a sending piece and the receiving piece it pairs with."""
    role = comm_role(op, schedule)
    src, dst = (op.rank, op.peer) if role == "send" else (op.peer, op.rank)
    if op.kind in (K.Send, K.Recv):
        return ("p2p", op.payload, op.microbatch, op.chunk, src, dst)
    return (op.kind.value, op.payload, op.unit, src, dst)


def comm_duration_bytes(op: Operator) -> float:
    return op.nbytes or 0


# -- insertion ----------------------------------------------------------------

@dataclass
class _Placement:
    before: dict[int, list[Operator]] = field(default_factory=dict)
    after: dict[int, list[Operator]] = field(default_factory=dict)

    def add(self, where: str, anchor: Operator, op: Operator) -> None:
        table = self.before if where == "before" else self.after
        table.setdefault(anchor.id, []).append(op)


def _piece(kind, rank, peer, payload, nbytes, **kw) -> Operator:
    return Operator(-1, kind, rank, peer=peer, nbytes=nbytes, payload=payload, **kw)


def _unit_points(schedule: Schedule) -> tuple[dict[int, Operator], dict[int, Operator]]:
    """First consuming entry-stage forward and gradient-completing backward per encoder unit."""
    first: dict[int, Operator] = {}
    done: dict[int, Operator] = {}
    seen: dict[int, int] = {}
    need = {}
    for op in schedule.per_rank[0]:
        if not op.kind.is_llm or schedule.stage_of(op) != 0:
            continue
        u = schedule.enc_unit_of(op.microbatch)
        if op.kind is K.LlmFwd:
            first.setdefault(u, op)
        else:
            if u not in need:
                need[u] = sum(len(schedule.enc_microbatches(u, r)) for r in schedule.encoder_ranks)
            seen[u] = seen.get(u, 0) + 1
            if seen[u] == need[u]:
                done[u] = op
    return first, done


def comm_edges(schedule: Schedule, sizes: PayloadSizes = PayloadSizes()) -> list[CommEdge]:
    """Data edges that cross ranks or modules, with their payload kind and size."""
    index, _ = compute_index(schedule)
    edges = []
    for op in schedule.ops():
        if not op.is_compute:
            continue
        for key in producer_keys(op, schedule):
            prod = index.get(key)
            if prod is None:
                continue
            pk, ck = prod.kind, op.kind
            if pk is K.LlmFwd and ck is K.LlmFwd:
                payload, n = "act", 1
            elif pk is K.LlmBwd and ck is K.LlmBwd:
                payload, n = "grad", 1
            elif pk is K.EncFwd and ck is K.LlmFwd:
                payload, n = "emb", 1
            elif pk is K.LlmBwd and ck is K.EncBwd:
                payload, n = "emb_grad", 1
            elif pk is K.LlmFwd and ck is K.GenFwd:
                payload, n = "gen_in", Fraction(1, len(schedule.generator_ranks))
            elif pk is K.GenBwd and ck is K.LlmBwd:
                payload, n = "gen_grad", Fraction(1, len(schedule.generator_ranks))
            else:
                continue  # same-module local dependency (fwd -> bwd)
            if payload in ("act", "grad") and prod.rank == op.rank:
                continue
            nbytes = sizes.of(payload) * n
            if isinstance(nbytes, Fraction) and nbytes.denominator == 1:
                nbytes = int(nbytes)
            edges.append(CommEdge(prod.id, op.id, payload, nbytes))
    return edges


def insert_comm_ops(schedule: Schedule, sizes: PayloadSizes = PayloadSizes()) -> Schedule:
    """Materialize every cross-rank or cross-module data edge as communication ops.

    Compute and FSDP ops keep their relative order; removing the inserted
    ops gives back the input schedule.
    """
    if schedule.has_comm:
        raise ScheduleError("schedule already contains communication ops")
    problems = verify_dependencies(schedule)
    if problems:
        shown = "; ".join(str(v) for v in problems[:3])
        raise ScheduleError(f"cannot insert communication: {shown}")
    index, _ = compute_index(schedule)
    place = _Placement()
    P = schedule.P
    last = schedule.num_stages - 1

    # stage-to-stage point-to-point traffic
    for op in schedule.ops():
        if not op.kind.is_llm:
            continue
        s = schedule.stage_of(op)
        if op.kind is K.LlmFwd and s > 0:
            prod, payload = index[(K.LlmFwd, op.microbatch, s - 1)], "act"
        elif op.kind is K.LlmBwd and s < last:
            prod, payload = index[(K.LlmBwd, op.microbatch, s + 1)], "grad"
        else:
            continue
        if prod.rank == op.rank:
            continue
        meta = dict(microbatch=op.microbatch, chunk=prod.chunk)
        nbytes = sizes.of(payload)
        place.add("after", prod, _piece(K.Send, prod.rank, op.rank, payload, nbytes, **meta))
        place.add("before", op, _piece(K.Recv, op.rank, prod.rank, payload, nbytes, **meta))

    if schedule.has_encoder:
        first, done = _unit_points(schedule)
        convert = schedule.config.llm_cp != schedule.config.enc_cp
        for u in range(schedule.num_enc_units):
            for q in schedule.encoder_ranks:
                mbs = schedule.enc_microbatches(u, q)
                if not mbs:
                    continue
                fwd, bwd = index[(K.EncFwd, u, q)], index[(K.EncBwd, u, q)]
                n_emb = sizes.emb * len(mbs)
                n_grad = sizes.emb_grad * len(mbs)
                if convert:
                    place.add("after", fwd, _piece(K.CpConvert, q, None, "cp", n_emb, unit=u))
                if q == 0:
                    place.add("after", fwd, _piece(K.Gather, 0, 0, "emb", n_emb, unit=u))
                    place.add("before", bwd, _piece(K.Scatter, 0, 0, "emb_grad", n_grad, unit=u))
                    continue
                place.add("after", fwd, _piece(K.Gather, q, 0, "emb", n_emb, unit=u))
                place.add("before", first[u], _piece(K.Gather, 0, q, "emb", n_emb, unit=u))
                place.add("after", done[u], _piece(K.Scatter, 0, q, "emb_grad", n_grad, unit=u))
                place.add("before", bwd, _piece(K.Scatter, q, 0, "emb_grad", n_grad, unit=u))

    if schedule.has_generator:
        root = P - 1
        shards = len(schedule.generator_ranks)
        for g in range(schedule.num_gen_units):
            mbs = schedule.gen_microbatches(g)
            n_in = _frac(sizes.gen_in * len(mbs), shards)
            n_grad = _frac(sizes.gen_grad * len(mbs), shards)
            fwd_last = [index[(K.LlmFwd, m, last)] for m in mbs]
            bwd_last = [index[(K.LlmBwd, m, last)] for m in mbs]
            for q in schedule.generator_ranks:
                gf, gb = index[(K.GenFwd, g, q)], index[(K.GenBwd, g, q)]
                if q == root:
                    place.add("after", fwd_last[-1], _piece(K.Scatter, q, q, "gen_in", n_in, unit=g))
                    place.add("after", gb, _piece(K.Gather, q, q, "gen_grad", n_grad, unit=g))
                    continue
                place.add("after", fwd_last[-1], _piece(K.Scatter, root, q, "gen_in", n_in, unit=g))
                place.add("before", gf, _piece(K.Scatter, q, root, "gen_in", n_in, unit=g))
                place.add("after", gb, _piece(K.Gather, q, root, "gen_grad", n_grad, unit=g))
                first_bwd = min(bwd_last, key=lambda o: o.id)
                place.add("before", first_bwd, _piece(K.Gather, root, q, "gen_grad", n_grad, unit=g))

    def ordered(ops: list[Operator]) -> list[Operator]:
        return sorted(ops, key=lambda o: (_PAYLOAD_ORDER[o.payload], o.kind is not K.CpConvert, o.peer if o.peer is not None else -1))

    per_rank = []
    for ops in schedule.per_rank:
        row = []
        for op in ops:
            row.extend(ordered(place.before.get(op.id, [])))
            row.append(op)
            row.extend(ordered(place.after.get(op.id, [])))
        per_rank.append(row)
    return schedule.replace_ops(per_rank)


def strip_comm(schedule: Schedule) -> Schedule:
    return schedule.replace_ops([[op for op in ops if op.kind not in COMM_KINDS] for ops in schedule.per_rank])


def ensure_comm(schedule: Schedule, sizes: PayloadSizes = PayloadSizes()) -> Schedule:
    return schedule if schedule.has_comm else insert_comm_ops(schedule, sizes)


# -- deadlock analysis -------------------------------------------------------

@dataclass
class DeadlockResult:
    """Outcome of :func:`deadlock_check`.

    ``status`` is ``ok``, ``cycle`` (``cycle`` lists the ops around one wait
    cycle in order) or ``unmatched`` (``unmatched`` lists sends, receives or
    barrier members without a partner).
    """

    status: str
    cycle: list[Operator] = field(default_factory=list)
    unmatched: list[Operator] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def describe(self) -> str:
        if self.status == "ok":
            return "ok: no deadlock"
        if self.status == "cycle":
            return "cycle: " + " -> ".join(op.label() for op in self.cycle)
        return "unmatched: " + ", ".join(op.label() for op in self.unmatched)


def match_comm(schedule: Schedule) -> tuple[dict[tuple, tuple[Operator, Operator]], list[Operator]]:
    """Pair sending and receiving pieces; returns pairs by key and the leftovers."""
    sends: dict[tuple, list[Operator]] = {}
    recvs: dict[tuple, list[Operator]] = {}
    for op in schedule.ops():
        if op.kind not in COMM_KINDS:
            continue
        role = comm_role(op, schedule)
        if role in ("send", "recv"):
            table = sends if role == "send" else recvs
            table.setdefault(match_key(op, schedule), []).append(op)
    pairs, unmatched = {}, []
    for key in sends.keys() | recvs.keys():
        s, r = sends.get(key, []), recvs.get(key, [])
        if len(s) == 1 and len(r) == 1:
            pairs[key] = (s[0], r[0])
        else:
            unmatched.extend(s + r)
    unmatched.sort(key=lambda o: o.id)
    return pairs, unmatched


def fsdp_barriers(schedule: Schedule) -> tuple[list[list[Operator]], list[Operator]]:
    groups: dict[tuple, list[Operator]] = {}
    for op in schedule.ops():
        if op.kind is K.FsdpSync:
            groups.setdefault(fsdp_key(op), []).append(op)
    barriers, unmatched = [], []
    for ops in groups.values():
        members = set(fsdp_group(schedule, ops[0]))
        if sorted(op.rank for op in ops) == sorted(members):
            barriers.append(ops)
        else:
            unmatched.extend(ops)
    return barriers, unmatched


def _shortest_cycle(graph: nx.DiGraph, seeds: list) -> list[tuple]:
    """Shortest cycle through any of ``seeds``, as a list of edges."""
    best: list | None = None
    for seed in seeds:
        parent = {seed: None}
        frontier = [seed]
        depth = 0
        found = None
        while frontier and found is None and (best is None or depth + 1 < len(best)):
            depth += 1
            nxt = []
            for u in frontier:
                for v in graph.successors(u):
                    if v == seed:
                        found = u
                        break
                    if v not in parent:
                        parent[v] = u
                        nxt.append(v)
                if found is not None:
                    break
            frontier = nxt
        if found is None:
            continue
        nodes = [found]
        while nodes[-1] != seed:
            nodes.append(parent[nodes[-1]])
        nodes.reverse()
        edges = list(zip(nodes, nodes[1:] + [seed]))
        if best is None or len(edges) < len(best):
            best = edges
    return best


def deadlock_check(schedule: Schedule, rendezvous: bool = False) -> DeadlockResult:
    """Wait-for analysis of a schedule with communication ops.

    Sends are eager (non-blocking) by default; with ``rendezvous`` a send and
    its receive complete together.  ``FsdpSync`` ops of one group always act
    as a barrier.  Ops that must complete together are merged into one node
    before looking for a cycle.
    """
    pairs, unmatched = match_comm(schedule)
    barriers, bad_barriers = fsdp_barriers(schedule)
    unmatched = sorted(unmatched + bad_barriers, key=lambda o: o.id)
    if unmatched:
        return DeadlockResult("unmatched", unmatched=unmatched)

    ops = {op.id: op for op in schedule.ops()}
    node = {i: i for i in ops}
    merge = [list(b) for b in barriers]
    if rendezvous:
        merge.extend([s, r] for s, r in pairs.values())
    for group in merge:
        head = group[0].id
        for op in group[1:]:
            node[op.id] = head

    graph = nx.DiGraph()
    graph.add_nodes_from(set(node.values()))

    def edge(u: Operator, v: Operator) -> None:
        a, b = node[u.id], node[v.id]
        if a != b and not graph.has_edge(a, b):
            graph.add_edge(a, b, ops=(u, v))

    for rank_ops in schedule.per_rank:
        for prev, nxt in zip(rank_ops, rank_ops[1:]):
            edge(prev, nxt)
    if not rendezvous:
        for s, r in pairs.values():
            edge(s, r)
    try:
        cycle = _shortest_cycle(graph, [a for a, _ in nx.find_cycle(graph)])
    except nx.NetworkXNoCycle:
        return DeadlockResult("ok")
    path: list[Operator] = []
    for a, b in cycle:
        u, v = graph.edges[a, b]["ops"]
        for op in (u, v):
            if not path or path[-1] is not op:
                path.append(op)
    if len(path) > 1 and path[0] is path[-1]:
        path.pop()
    return DeadlockResult("cycle", cycle=path)


# -- fault injection -----------------------------------------------------------

def inject_head_to_head(schedule: Schedule, rng: np.random.Generator, tag: int = 0) -> Schedule:
    """Add a receive-before-send exchange between two random ranks.

    Each rank first waits for the other's message, so the pair deadlocks
    under either send model.  Needs ``P >= 2``.
    """
    if schedule.P < 2:
        raise ValueError("a head-to-head exchange needs at least two ranks")
    a, b = (int(x) for x in rng.choice(schedule.P, size=2, replace=False))
    per_rank = [list(ops) for ops in schedule.per_rank]
    for me, other in ((a, b), (b, a)):
        pos = int(rng.integers(0, len(per_rank[me]) + 1))
        meta = dict(microbatch=-1 - tag, chunk=0)
        pair = [
            Operator(-1, K.Recv, me, peer=other, nbytes=1, payload="fault", **meta),
            Operator(-1, K.Send, me, peer=other, nbytes=1, payload="fault", **meta),
        ]
        per_rank[me][pos:pos] = pair
    return schedule.replace_ops(per_rank)


def swap_adjacent_recvs(schedule: Schedule, rng: np.random.Generator) -> Schedule | None:
    """Swap the positions of two consecutive receiving pieces on a random rank."""
    candidates = []
    for r, ops in enumerate(schedule.per_rank):
        positions = [i for i, op in enumerate(ops) if op.kind in COMM_KINDS and comm_role(op, schedule) == "recv"]
        candidates.extend((r, i, j) for i, j in zip(positions, positions[1:]))
    if not candidates:
        return None
    r, i, j = candidates[int(rng.integers(len(candidates)))]
    per_rank = [list(ops) for ops in schedule.per_rank]
    per_rank[r][i], per_rank[r][j] = per_rank[r][j], per_rank[r][i]
    return schedule.replace_ops(per_rank)


def delete_op(schedule: Schedule, op_id: int) -> Schedule:
    return schedule.replace_ops([[op for op in ops if op.id != op_id] for ops in schedule.per_rank])
