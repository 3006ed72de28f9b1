from collections import Counter

import numpy as np
import pytest

from nestpipe.comm import (
    PayloadSizes,
    comm_edges,
    comm_role,
    deadlock_check,
    delete_op,
    inject_head_to_head,
    insert_comm_ops,
    match_comm,
    strip_comm,
    swap_adjacent_recvs,
)
from nestpipe.nesting import ModulePlacement, Strategy, build_bigmac, build_strategy
from nestpipe.schedule import COMM_KINDS, K, PipelineConfig, ScheduleError, generate_llm_schedule
from nestpipe.simulator import CostModel, SimulationStall, simulate

GEN = ModulePlacement(has_generator=True)


def labels(ops):
    out = []
    for op in ops:
        if op.kind in (K.Send, K.Recv):
            out.append(f"{op.kind.value}:{op.payload}{op.microbatch}")
        elif op.kind.is_llm:
            out.append(f"{'F' if op.kind is K.LlmFwd else 'B'}{op.microbatch}")
        else:
            out.append(op.kind.value)
    return out


def grid():
    for P in (1, 2, 4):
        for V in (1, 2):
            for M in (P, 4 * P):
                if P == 1 and V == 2:
                    continue
                for strategy in Strategy:
                    yield strategy, PipelineConfig(P=P, M=M, V=V)


class TestInsertion:
    def test_two_stage_chain(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=2)))
        assert labels(s.per_rank[0]) == ["F0", "Send:act0", "F1", "Send:act1", "Recv:grad0", "B0", "Recv:grad1", "B1"]
        assert labels(s.per_rank[1]) == ["Recv:act0", "F0", "B0", "Send:grad0", "Recv:act1", "F1", "B1", "Send:grad1"]

    def test_single_rank_keeps_only_local_markers(self):
        s = insert_comm_ops(build_bigmac(PipelineConfig(P=1, M=2, W=1), GEN))
        counts = Counter(op.kind for op in s.ops())
        assert counts[K.Send] == counts[K.Recv] == 0
        markers = [op for op in s.ops() if op.kind in (K.Gather, K.Scatter)]
        assert len(markers) == 8
        assert all(comm_role(op, s) == "self" for op in markers)

    def test_interleaved_send_count(self):
        # every one of the PV-1 stage boundaries of a microbatch crosses ranks
        s = insert_comm_ops(build_bigmac(PipelineConfig(P=4, M=64, V=2)))
        sends = Counter(op.payload for op in s.ops() if op.kind is K.Send)
        assert sends["act"] == 64 * (4 * 2 - 1)
        assert sends["grad"] == sends["act"]

    def test_metadata_on_pieces(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=4, V=2)))
        for op in s.ops():
            if op.kind in (K.Send, K.Recv):
                assert op.microbatch is not None and op.chunk is not None
                assert op.nbytes == 1

    def test_gather_before_first_entry_forward(self):
        s = insert_comm_ops(build_bigmac(PipelineConfig(P=4, M=16)))
        ops = s.per_rank[0]
        for u in range(4):
            first = next(i for i, op in enumerate(ops) if op.kind is K.LlmFwd and op.microbatch // 4 == u)
            gathers = [i for i, op in enumerate(ops) if op.kind is K.Gather and op.unit == u and op.payload == "emb"]
            assert len(gathers) == 4 and max(gathers) < first

    def test_scatter_after_gradients_complete(self):
        s = insert_comm_ops(build_bigmac(PipelineConfig(P=4, M=16)))
        ops = s.per_rank[0]
        for u in range(4):
            done = max(i for i, op in enumerate(ops) if op.kind is K.LlmBwd and op.microbatch // 4 == u)
            scat = [i for i, op in enumerate(ops) if op.kind is K.Scatter and op.unit == u and op.peer != 0]
            assert len(scat) == 3 and min(scat) > done
        for r in (1, 2, 3):
            ops = s.per_rank[r]
            for i, op in enumerate(ops):
                if op.kind is K.EncBwd:
                    assert (ops[i - 1].kind, ops[i - 1].payload, ops[i - 1].unit) == (K.Scatter, "emb_grad", op.unit)

    def test_generator_handoff_from_last_stage(self):
        s = insert_comm_ops(build_bigmac(PipelineConfig(P=2, M=4), GEN))
        for op in s.ops():
            if op.payload in ("gen_in", "gen_grad") and op.peer != op.rank:
                assert 1 in (op.rank, op.peer)
                assert op.nbytes == pytest.approx(0.5)

    def test_cp_conversion_precedes_gather(self):
        s = insert_comm_ops(build_bigmac(PipelineConfig(P=2, M=8, llm_cp=2, enc_cp=1)))
        for ops in s.per_rank:
            for i, op in enumerate(ops):
                if op.kind is K.EncFwd:
                    assert ops[i + 1].kind is K.CpConvert
                    assert ops[i + 2].kind is K.Gather
        plain = insert_comm_ops(build_bigmac(PipelineConfig(P=2, M=8)))
        assert not any(op.kind is K.CpConvert for op in plain.ops())

    def test_sizes_are_carried(self):
        sizes = PayloadSizes(act=5, grad=7)
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=2)), sizes)
        assert {op.nbytes for op in s.ops() if op.payload == "act"} == {5}
        assert {op.nbytes for op in s.ops() if op.payload == "grad"} == {7}

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            PayloadSizes(act=0)

    def test_rejects_double_insertion(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=2)))
        with pytest.raises(ScheduleError, match="already"):
            insert_comm_ops(s)

    def test_rejects_violating_schedule(self):
        s = generate_llm_schedule(PipelineConfig(P=2, M=2))
        broken = s.replace_ops([list(reversed(s.per_rank[0])), s.per_rank[1]])
        with pytest.raises(ScheduleError, match="cannot insert"):
            insert_comm_ops(broken)


@pytest.mark.parametrize("strategy,config", list(grid()))
def test_order_preserved_and_conserved(strategy, config):
    base = build_strategy(strategy, config, GEN)
    s = insert_comm_ops(base)
    stripped = strip_comm(s)
    for a, b in zip(stripped.per_rank, base.per_rank):
        assert [(o.kind, o.microbatch, o.chunk, o.unit) for o in a] == [(o.kind, o.microbatch, o.chunk, o.unit) for o in b]
    pairs, unmatched = match_comm(s)
    assert unmatched == []
    for snd, rcv in pairs.values():
        assert (snd.microbatch, snd.chunk, snd.payload, snd.unit) == (rcv.microbatch, rcv.chunk, rcv.payload, rcv.unit)
    per_unit = Counter((op.kind, op.payload, op.unit, op.rank, op.peer) for op in s.ops() if op.kind in (K.Gather, K.Scatter))
    assert set(per_unit.values()) <= {1}
    assert deadlock_check(s).ok


def test_comm_edges_cover_every_piece_pair():
    s = build_bigmac(PipelineConfig(P=4, M=16, V=2), GEN)
    edges = comm_edges(s)
    kinds = Counter(e.payload for e in edges)
    assert kinds["act"] == 16 * 7 and kinds["grad"] == 16 * 7
    assert kinds["emb"] == kinds["emb_grad"] == 16
    assert kinds["gen_in"] == kinds["gen_grad"] == 16 * 4
    assert all(e.nbytes > 0 for e in edges)


class TestDeadlock:
    def test_unmatched_receive(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=2)))
        send = next(op for op in s.ops() if op.kind is K.Send)
        result = deadlock_check(delete_op(s, send.id))
        assert result.status == "unmatched"
        assert [op.kind for op in result.unmatched] == [K.Recv]
        assert result.describe().startswith("unmatched: Recv")

    def test_head_to_head_cycle(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=4, M=8)))
        faulty = inject_head_to_head(s, np.random.default_rng(0))
        for rendezvous in (False, True):
            result = deadlock_check(faulty, rendezvous=rendezvous)
            assert result.status == "cycle"
            assert len(result.cycle) == 4
            assert all(op.kind in COMM_KINDS for op in result.cycle)

    def test_head_to_head_needs_two_ranks(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=1, M=2)))
        with pytest.raises(ValueError):
            inject_head_to_head(s, np.random.default_rng(0))

    def test_synchronous_sends_cross_in_steady_state(self):
        # under rendezvous, neighbouring ranks both send before receiving in steady 1F1B
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=4)))
        result = deadlock_check(s, rendezvous=True)
        assert result.status == "cycle"
        kinds = [op.kind for op in result.cycle]
        assert kinds.count(K.Send) == 2 and kinds.count(K.Recv) == 2
        with pytest.raises(SimulationStall):
            simulate(s, CostModel(), rendezvous=True)

    def test_unfilled_pipeline_is_rendezvous_safe(self):
        s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=2, M=1)))
        assert deadlock_check(s, rendezvous=True).ok

    @pytest.mark.parametrize("rendezvous", [False, True])
    @pytest.mark.parametrize("seed", range(40))
    def test_checker_agrees_with_simulator(self, seed, rendezvous):
        rng = np.random.default_rng(seed)
        P = int(rng.choice([2, 4]))
        V = int(rng.choice([1, 2]))
        M = P * int(rng.choice([1, 2, 4]))
        strategy = list(Strategy)[seed % 3]
        s = insert_comm_ops(build_strategy(strategy, PipelineConfig(P=P, M=M, V=V), GEN))
        mutated = swap_adjacent_recvs(s, rng) or s
        ok = deadlock_check(mutated, rendezvous=rendezvous).ok
        try:
            simulate(mutated, CostModel(comm_latency=1), rendezvous=rendezvous)
            stalled = False
        except SimulationStall:
            stalled = True
        assert ok != stalled


def test_swap_needs_two_receives():
    s = insert_comm_ops(generate_llm_schedule(PipelineConfig(P=1, M=2)))
    assert swap_adjacent_recvs(s, np.random.default_rng(0)) is None


def test_fsdp_barrier_members_must_match():
    from nestpipe.extensions import decorate_fsdp

    s = insert_comm_ops(decorate_fsdp(build_bigmac(PipelineConfig(P=2, M=4)), "collective"))
    assert deadlock_check(s).ok
    sync = next(op for op in s.ops() if op.kind is K.FsdpSync)
    result = deadlock_check(delete_op(s, sync.id))
    assert result.status == "unmatched"
    assert all(op.kind is K.FsdpSync for op in result.unmatched)
