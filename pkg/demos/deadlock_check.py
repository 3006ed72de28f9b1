"""Insert communication ops, then break a schedule on purpose and let the checker find the cycle."""
from nestpipe import PipelineConfig, build_strategy, deadlock_check, insert_comm_ops
from nestpipe.schedule import OperatorKind as K

schedule = insert_comm_ops(build_strategy("bigmac", PipelineConfig(P=4, M=16, W=3)))
print("as built:", deadlock_check(schedule).describe())

# move rank 0's first Recv ahead of everything it depends on
ops = list(schedule.per_rank[0])
first_recv = next(i for i, op in enumerate(ops) if op.kind is K.Recv)
ops.insert(0, ops.pop(first_recv))
per_rank = [list(r) for r in schedule.per_rank]
per_rank[0] = ops
broken = schedule.replace_ops(per_rank)
print("recv hoisted:", deadlock_check(broken).describe())
