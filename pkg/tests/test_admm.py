import numpy as np
import pytest

from pdcguard.admm import (
    AggregationError,
    ConsensusLoop,
    ConsensusMsg,
    EstimatorState,
    MissingMessageError,
    RoundOrder,
    average_consensus,
    build_state_model,
    local_dual_update,
    local_primal_update,
    rr_consensus,
    run_loop,
)
from pdcguard.attacks import AttackSpec, BiasGenerator, average_bias
from pdcguard.prony import HankelBlock, solve_regression, stack_blocks

from conftest import make_blocks

CASE5_ORDERS = [(1, 2, 4, 5, 3), (3, 2, 5, 4, 1), (2, 5, 4, 1, 3)]


def _zero_state(d=3, rho=1e-6):
    return EstimatorState(HankelBlock(np.zeros((1, d)), [0.0]), rho)


def test_dual_update_examples():
    s = _zero_state()
    s.a = np.ones(3)
    np.testing.assert_array_equal(local_dual_update(s, np.ones(3)), np.zeros(3))
    np.testing.assert_allclose(local_dual_update(s, np.zeros(3)), np.full(3, 1e-6))
    with pytest.raises(ValueError, match="shape"):
        local_dual_update(s, np.ones(4))


def test_primal_update_zero_block():
    s = _zero_state()
    z = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(local_primal_update(s, z), z)
    s.w = s.rho * z
    np.testing.assert_allclose(local_primal_update(s, z), 0.0, atol=1e-15)


def test_primal_update_matches_normal_equations(rng):
    H, c = rng.normal(size=(6, 4)), rng.normal(size=6)
    s = EstimatorState(HankelBlock(H, c), 1e-6)
    s.w = rng.normal(size=4) * 1e-6
    z = rng.normal(size=4)
    want = np.linalg.solve(H.T @ H + 1e-6 * np.eye(4), H.T @ c - s.w + 1e-6 * z)
    got = local_primal_update(s, z)
    assert np.linalg.norm(got - want) <= 1e-10 * np.linalg.norm(want)


def test_rho_change_refactors(rng):
    H, c = rng.normal(size=(6, 2)), rng.normal(size=6)
    s = EstimatorState(HankelBlock(H, c), 1e-6)
    s.rho = 2.0
    want = np.linalg.solve(H.T @ H + 2.0 * np.eye(2), H.T @ c)
    np.testing.assert_allclose(local_primal_update(s, np.zeros(2)), want)
    with pytest.raises(ValueError):
        s.rho = 0.0


def test_average_consensus_examples():
    v = np.array([1.0, 2.0])
    assert np.array_equal(average_consensus([ConsensusMsg(i, 1, v) for i in (1, 2, 3)]), v)
    np.testing.assert_array_equal(average_consensus([ConsensusMsg(1, 1, v), ConsensusMsg(2, 1, -v)]), 0.0)
    with pytest.raises(MissingMessageError):
        average_consensus([ConsensusMsg(1, 1, v)], expected=[1, 2])
    with pytest.raises(AggregationError, match="duplicate"):
        average_consensus([ConsensusMsg(1, 1, v), ConsensusMsg(1, 1, v)])


def test_rr_consensus_selection():
    msgs = [ConsensusMsg(i, 1, np.full(2, float(i))) for i in range(1, 6)]
    np.testing.assert_array_equal(rr_consensus(msgs, 1, RoundOrder.fixed(5)), [1.0, 1.0])
    order = RoundOrder(CASE5_ORDERS, 0.9)
    assert order.selected(5) == 3
    assert order.selected(10) == 1
    np.testing.assert_array_equal(rr_consensus(msgs, 5, order), 0.9 * np.full(2, 3.0))
    with pytest.raises(MissingMessageError):
        rr_consensus(msgs[:2], 3, RoundOrder.fixed(5))


def test_round_order_validation():
    with pytest.raises(ValueError):
        RoundOrder([(1, 2, 2)])
    with pytest.raises(ValueError):
        RoundOrder([(1, 2)], alpha=0.0)
    assert RoundOrder.random(5, 3, 0).period_orders == RoundOrder.random(5, 3, 0).period_orders


def test_honest_dual_mean_first_iteration():
    _, blocks = make_blocks(N=2, p=4)
    rec = run_loop(blocks, iters=1)[0]
    assert np.max(np.abs(rec.w[1] + rec.w[2])) < 1e-18


def test_no_attack_converges_to_centralized(bench_blocks):
    _, blocks = bench_blocks
    x = solve_regression(stack_blocks(blocks))
    z = run_loop(blocks, iters=500)[-1].z
    assert np.linalg.norm(z - x) / np.linalg.norm(x) < 1e-6


def test_random_bias_diverges():
    # small residues: the drift the duals accumulate is not pulled back by H'H
    _, blocks = make_blocks(magnitude=(0.05, 0.15))
    atk = AttackSpec({2, 3}, {i: BiasGenerator("iid-random", 5.0, seed=i) for i in (2, 3)})
    norms = [np.linalg.norm(r.z) for r in run_loop(blocks, iters=3000, attack=atk)]
    assert norms[-1] > 3 * norms[0]
    assert norms[-1] > norms[2000] > norms[1000]


def test_exclusion_converges_to_reduced_oracle(bench_blocks):
    _, blocks = bench_blocks
    atk = AttackSpec({2, 3}, {i: BiasGenerator("iid-random", 5.0, seed=i) for i in (2, 3)})
    x = solve_regression(stack_blocks([blocks[0], blocks[3], blocks[4]]))
    trace = run_loop(blocks, iters=500, attack=atk, exclusions={2, 3})
    assert set(trace[-1].a) == {1, 4, 5}
    assert np.linalg.norm(trace[-1].z - x) / np.linalg.norm(x) < 1e-6


def test_loop_records_and_hooks(bench_blocks):
    _, blocks = bench_blocks
    seen = []
    trace = run_loop(blocks, iters=3, hooks=seen.append)
    assert [r.k for r in trace] == [1, 2, 3] and seen == trace
    with pytest.raises(ValueError):
        run_loop(blocks, iters=0)


def test_rr_switch_restarts_schedule(bench_blocks):
    _, blocks = bench_blocks
    loop = ConsensusLoop(blocks)
    loop.run(2)
    loop.switch_protocol("rr", RoundOrder.fixed(5))
    recs = loop.run(6)
    assert [r.rr_index for r in recs] == [1, 2, 3, 4, 5, 6]
    assert [r.source for r in recs] == [1, 2, 3, 4, 5, 1]
    np.testing.assert_array_equal(recs[0].z, recs[0].a[1])


def test_missing_message_swaps_next_unvisited(bench_blocks):
    _, blocks = bench_blocks
    loop = ConsensusLoop(blocks, protocol="rr", missing={(2, 2)})
    recs = loop.run(5)
    assert [r.source for r in recs] == [1, 3, 2, 4, 5]
    assert 2 not in recs[1].a


def test_missing_message_under_averaging_raises(bench_blocks):
    _, blocks = bench_blocks
    with pytest.raises(MissingMessageError):
        run_loop(blocks, iters=2, missing={(2, 1)})


def test_exclusion_guards(bench_blocks):
    _, blocks = bench_blocks
    loop = ConsensusLoop(blocks)
    with pytest.raises(ValueError):
        loop.exclude({1, 2, 3, 4, 5})
    with pytest.raises(ValueError):
        loop.exclude({9})
    loop.exclude({2})
    with pytest.raises(ValueError, match="active"):
        loop.switch_protocol("rr", RoundOrder.fixed(5))


def _toy_blocks(rng, N, d):
    return [HankelBlock(rng.normal(size=(d + 3, d)), rng.normal(size=d + 3)) for _ in range(N)]


@pytest.mark.parametrize("N, d", [(2, 2), (3, 4)])
@pytest.mark.parametrize("biased", [False, True])
def test_state_model_matches_agents(rng, N, d, biased):
    blocks = _toy_blocks(rng, N, d)
    rho = 0.5
    atk = None
    if biased:
        atk = AttackSpec({2}, {2: BiasGenerator("iid-random", 1.0, seed=3)})
    loop = ConsensusLoop(blocks, rho=rho, attack=atk, record_truth=True)
    loop.run(10)
    model = build_state_model(blocks, rho)
    D = [average_bias(atk, N, k, d) for k in range(1, 11)]
    sim = model.simulate(model.initial_state(blocks, rho), D[:9])
    for k, got in enumerate(sim, start=1):
        want = np.concatenate([loop.truth[k - 1].a[i] for i in range(1, N + 1)])
        assert np.max(np.abs(got - want)) < 1e-9


def test_state_model_rows_sum_to_one(rng):
    model = build_state_model(_toy_blocks(rng, 3, 4), 1e-3)
    np.testing.assert_allclose(model.L.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        build_state_model(_toy_blocks(rng, 2, 2), 0.0)


def test_state_model_bounded_without_bias(rng):
    blocks = _toy_blocks(rng, 3, 2)
    model = build_state_model(blocks, 0.5)
    traj = model.simulate(model.initial_state(blocks, 0.5), [np.zeros(2)] * 200)
    assert max(np.linalg.norm(x) for x in traj) < 1e3


def test_identical_blocks_rr_equals_average(rng):
    blk = _toy_blocks(rng, 1, 4)[0]
    blocks = [HankelBlock(blk.H.copy(), blk.c.copy()) for _ in range(4)]
    av = run_loop(blocks, iters=50, rho=0.3)
    rr = run_loop(blocks, protocol="rr", order=RoundOrder.fixed(4), iters=50, rho=0.3)
    assert max(np.max(np.abs(a.z - r.z)) for a, r in zip(av, rr)) <= 1e-12
