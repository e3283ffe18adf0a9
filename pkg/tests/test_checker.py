import pytest

from flowmove import proto
from flowmove.checker import (
    CONNECT_PING,
    TWO_FLOWS,
    CheckerConfig,
    Cmd,
    DeadlockTrace,
    Move,
    NonProgressCycleTrace,
    Pass,
    Script,
    TraceDiverged,
    apply_move,
    check,
    check_liveness,
    check_safety,
    confirm,
    dump_trace,
    enabled_moves,
    host_addr,
    initial_state,
    load_trace,
    replay,
)
from flowmove.simnet import FaultDecision, send

NOTHING = Script(commands=((), ()))

# Regression baselines, recorded on the first verified run.
BASELINES = {
    (0, 0, 0): 11,
    (0, 2, 1): 289,
    (1, 0, 0): 149,
    (1, 1, 0): 591,
    (1, 1, 1): 3318,
    (1, 2, 1): 6368,
    (2, 0, 0): 1532,
}


def cfg(m=1, loss=0, dup=0, **kw):
    return CheckerConfig(max_migrations=m, loss_budget=loss, dup_budget=dup, **kw)


def walk(script, config, picks):
    """Follow a sequence of move predicates from the initial state."""
    g = initial_state(script, config)
    for pick in picks:
        moves = [m for m in enabled_moves(g, script, config) if pick(m)]
        assert moves, f"no move matches at {g}"
        g = apply_move(g, moves[0], script, config).state
    return g


def test_empty_configuration_has_no_moves():
    g = initial_state(NOTHING, cfg(m=0))
    assert enabled_moves(g, NOTHING, cfg(m=0)) == []


def test_one_message_loss_budget_one():
    config = cfg(m=0, loss=1, dup=0)
    g = walk(CONNECT_PING, config, [lambda m: m.kind == "cmd"])
    moves = enabled_moves(g, CONNECT_PING, config)
    assert [m.decision for m in moves if m.kind == "deliver"] == [FaultDecision.DELIVER, FaultDecision.DROP]


def test_fairness_token_restricts_timeouts():
    config = cfg(m=0)
    g = initial_state(CONNECT_PING, config)
    g = g._replace(timers=((0, 101, 0), (1, 201, 0)), token=0)
    timeouts = [m for m in enabled_moves(g, CONNECT_PING, config) if m.kind == "timeout"]
    assert {m.host for m in timeouts} == {0}
    unfair = cfg(m=0, fair_timeouts=False)
    assert {m.host for m in enabled_moves(g, CONNECT_PING, unfair) if m.kind == "timeout"} == {0, 1}


def test_timeouts_wait_for_quiet_network():
    config = cfg(m=0)
    g = walk(CONNECT_PING, config, [lambda m: m.kind == "cmd"])
    assert g.timers and not g.net.empty
    assert not any(m.kind == "timeout" for m in enabled_moves(g, CONNECT_PING, config))


def test_canonical_encoding_ignores_arrival_order():
    g = initial_state(CONNECT_PING, cfg())
    a, b = b"\xec" + b"1", b"\xec" + b"2"
    n1 = send(send(g.net, a, host_addr(0, 0), host_addr(1, 0)), b, host_addr(0, 0), host_addr(1, 0))
    n2 = send(send(g.net, b, host_addr(0, 0), host_addr(1, 0)), a, host_addr(0, 0), host_addr(1, 0))
    assert g._replace(net=n1).canonical() == g._replace(net=n2).canonical()
    assert g._replace(token=1).canonical() != g.canonical()


@pytest.mark.parametrize("key", sorted(BASELINES))
def test_safety_passes_with_baseline_state_count(key):
    m, loss, dup = key
    v = check_safety(CONNECT_PING, cfg(m, loss, dup))
    assert isinstance(v, Pass)
    assert v.stats.states == BASELINES[key]
    assert v.max_migrations == m


def test_state_count_monotone():
    counts = {k: check_safety(CONNECT_PING, cfg(*k)).stats.states for k in [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1), (2, 0, 0)]}
    assert counts[(0, 0, 0)] <= counts[(1, 0, 0)] <= counts[(2, 0, 0)]
    assert counts[(1, 0, 0)] <= counts[(1, 1, 0)] <= counts[(1, 1, 1)]


def test_liveness_small():
    v = check_liveness(CONNECT_PING, cfg(1, 1, 1))
    assert isinstance(v, Pass)
    assert v.stats.concurrent_migration_states > 0


def test_two_flows_share_versions_and_ilists():
    # Includes a SYN for the second flow racing the peer's move.
    v = check(TWO_FLOWS, cfg(1, 1, 0))
    assert isinstance(v, Pass), v.summary()
    assert v.stats.states == 27908


def test_deleted_migration_ack_deadlocks(monkeypatch):
    monkeypatch.setattr(proto, "migration_ack", lambda conn, f: None)
    config = cfg(1, max_retries=2)
    v = check_safety(CONNECT_PING, config)
    assert isinstance(v, DeadlockTrace)
    assert any("FAILED/ESTABLISHED" in p or "ESTABLISHED/FAILED" in p for p in v.problems)
    assert confirm(v, CONNECT_PING, config)


def test_implicit_ack_cycle_replays():
    config = cfg(1, 1, 1, implicit_ack=True)
    v = check_liveness(CONNECT_PING, config)
    assert isinstance(v, NonProgressCycleTrace)
    assert confirm(v, CONNECT_PING, config)
    assert replay(v.moves, CONNECT_PING, config).log == [line for line in v.log if line != "-- cycle starts --"]


def test_unfair_timeouts_starve():
    fair = cfg(2, 1, 0)
    unfair = cfg(2, 1, 0, fair_timeouts=False)
    assert isinstance(check_liveness(CONNECT_PING, fair), Pass)
    v = check_liveness(CONNECT_PING, unfair)
    assert isinstance(v, NonProgressCycleTrace)
    cycle = v.moves[v.cycle_start:]
    # One host fires over and over; the other never gets its turn.
    assert {m.kind for m in cycle} == {"timeout"} and len({m.host for m in cycle}) == 1


def test_replay_of_pass_path_matches_exploration():
    config = cfg(1)
    g = initial_state(CONNECT_PING, config)
    moves, states = [], [g]
    for _ in range(12):
        options = enabled_moves(g, CONNECT_PING, config)
        if not options:
            break
        moves.append(options[-1])
        g = apply_move(g, options[-1], CONNECT_PING, config).state
        states.append(g)
    r = replay(moves, CONNECT_PING, config)
    assert [s.canonical() for s in r.states] == [s.canonical() for s in states]


def test_replay_rejects_impossible_move():
    with pytest.raises(TraceDiverged):
        replay([Move("timeout", 0, flow_id=101)], CONNECT_PING, cfg())


def test_trace_file_round_trip():
    config = cfg(1, 1, 1, implicit_ack=True)
    v = check_liveness(CONNECT_PING, config)
    kind, script, config2, moves, start = load_trace(dump_trace(v, CONNECT_PING, config))
    assert (kind, script, moves, start) == ("NonProgressCycleTrace", CONNECT_PING, v.moves, v.cycle_start)
    assert config2.implicit_ack and config2.initial_versions == config.initial_versions


def test_script_validation():
    with pytest.raises(ValueError):
        Script(commands=((), (Cmd("connect"),)))
    with pytest.raises(ValueError):
        CheckerConfig(max_migrations=-1)
