from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import TraceBuilder
from coordcascade.dti import (MAX_HEADS, DtiParams, DtiState, calibrate, evaluate_intervention, load_params,
                              lookup, run_with_dti, save_params, step, trajectories)
from coordcascade.errors import InsufficientCascades, MissingParams, UnknownRoot
from coordcascade.pipeline import collect
from coordcascade.sim.engine import SimConfig, run_simulation
from coordcascade.trace import iter_lines, validate_bundle

COND = ("fully_connected", "reasoning")
HEAVY = {"delegate": 0.3, "revise": 0.3, "contradict": 0.3, "merge": 0.05, "endorse": 0.05}
BALANCED = {"delegate": 0.1, "revise": 0.2, "contradict": 0.2, "merge": 0.35, "endorse": 0.15}


def _params(a=1.0, b=1.0, delta=2.0, N=None):
    return DtiParams(COND, a, delta, b, 0, N)


def _drive(builder: TraceBuilder, params, root="r"):
    state = DtiState()
    deficits, fired = [], []
    for rec in builder.records:
        _, d = step(state, params, rec, root)
        if rec.event_type != "propose_claim":
            deficits.append(d.deficit if d else state.deficit(root, params))
            fired.append(d is not None)
    return state, deficits, fired


# ---------------------------------------------------------------------------
# state update
# ---------------------------------------------------------------------------


def test_deficit_grows_and_triggers_at_three():
    b = TraceBuilder().propose("r").contradict("x1", "r").contradict("x2", "r").contradict("x3", "r")
    state, deficits, fired = _drive(b, _params())
    assert deficits == [1.0, 2.0, 3.0]
    assert fired == [False, False, True]
    s = state.roots["r"]
    assert (s.t, s.m, s.last_trigger_step) == (0, 1, 4)


def test_merge_offsets_pressure():
    b = (TraceBuilder().propose("r").contradict("x1", "r").merge("m", ("r", "x1"))
         .contradict("x2", "m"))
    _, deficits, fired = _drive(b, _params())
    assert deficits == [1.0, 1.0, 2.0]
    assert not any(fired)


def test_infinite_threshold_never_fires():
    b = TraceBuilder().propose("r")
    for i in range(200):
        b.contradict(f"x{i}", "r")
    _, _, fired = _drive(b, _params(delta=math.inf))
    assert not any(fired)


def test_single_head_defers_trigger():
    # a linear revision chain leaves one head, nothing to integrate
    b = TraceBuilder().propose("r")
    prev = "r"
    for i in range(6):
        b.revise(f"v{i}", prev)
        prev = f"v{i}"
    _, deficits, fired = _drive(b, _params())
    assert deficits[-1] == 6.0 and not any(fired)


def test_unknown_root_and_missing_params():
    rec = TraceBuilder().propose("r").contradict("x", "r").records[1]
    with pytest.raises(UnknownRoot):
        step(DtiState(), _params(), rec, "r")
    with pytest.raises(MissingParams):
        step(DtiState(), None, rec, "r")


@st.composite
def two_root_streams(draw):
    """Interleaved expansions and merges on two independent roots."""
    b = TraceBuilder().propose("A").propose("B")
    heads = {"A": ["A"], "B": ["B"]}
    owner = {}
    for i in range(draw(st.integers(1, 60))):
        root = draw(st.sampled_from("AB"))
        hs = heads[root]
        cid = f"{root}{i}"
        if len(hs) >= 2 and draw(st.booleans()):
            b.merge(cid, (hs[-1], hs[-2]))
            hs[-2:] = [cid]
        else:
            kind = draw(st.sampled_from(["revise", "contradict"]))
            getattr(b, kind)(cid, draw(st.sampled_from(hs)))
            hs.append(cid)
        owner[cid] = root
    return b, owner


@settings(max_examples=150, deadline=None)
@given(two_root_streams(), st.floats(0.1, 2.0), st.floats(0.2, 1.5), st.floats(0.0, 5.0))
def test_state_is_local_to_each_root(stream, a, b_exp, delta):
    b, owner = stream
    params = _params(a, b_exp, delta)
    joint = DtiState()
    alone = {"A": DtiState(), "B": DtiState()}
    for rec in b.records:
        root = rec.claim.claim_id if rec.event_type == "propose_claim" else owner[rec.claim.claim_id]
        _, d1 = step(joint, params, rec, root)
        _, d2 = step(alone[root], params, rec, root)
        assert (d1 is None) == (d2 is None)
        if d1 is not None:
            # reset law: the segment restarts with one integration already counted
            assert (joint.roots[root].t, joint.roots[root].m) == (0, 1)
            assert d1.deficit > delta and len(d1.heads) >= 2
        assert joint.roots[root] == alone[root].roots[root]
        assert len(joint.roots[root].leaves) <= MAX_HEADS


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 10), st.floats(1e-3, 3), st.integers(0, 10**4), st.integers(1, 100))
def test_pressure_is_monotone(a, b, t, dt):
    p = _params(a, b)
    assert p.pressure(t + dt) >= p.pressure(t)
    assert p.pressure(0) == 0.0


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _block_bundle(n_cascades=25):
    """Each cascade repeats [revise, contradict, merge, contradict]: k = t/2 and M = t/4."""
    b = TraceBuilder()
    for c in range(n_cascades):
        root = f"r{c}"
        b.propose(root)
        head = root
        for k in range(1 + c % 5):
            v, x, m, y = (f"{root}v{k}", f"{root}x{k}", f"{root}m{k}", f"{root}y{k}")
            b.revise(v, head).contradict(x, head).merge(m, (v, x)).contradict(y, m)
            head = y
    return b.bundle()


def test_calibration_recovers_exact_law():
    bundle = _block_bundle()
    assert validate_bundle(bundle).ok
    p = calibrate(bundle)[COND]
    assert p.beta_c_hat == pytest.approx(1.0, abs=1e-12)
    assert p.a_c == pytest.approx(0.25, abs=1e-12)
    assert p.delta_c == pytest.approx(0.0, abs=1e-12)
    assert p.n_cascades == 25


def test_trajectories_skip_proposals():
    (tr,) = trajectories(TraceBuilder().propose("r").contradict("x", "r").revise("v", "r").contradict("y", "v")
                         .bundle())
    assert (tr.t, tr.merges, tr.contradiction_times) == (3, 0, (1, 3))


def test_calibration_needs_contradictions_and_cascades():
    b = TraceBuilder()
    for c in range(25):
        b.propose(f"r{c}").revise(f"v{c}", f"r{c}")
    with pytest.raises(InsufficientCascades):
        calibrate(b.bundle())
    with pytest.raises(InsufficientCascades):
        calibrate(_block_bundle(10))


def test_default_calibration_is_positive():
    p = calibrate([run_simulation(SimConfig(N=N, seed=100 + s)) for N in (8, 32) for s in range(2)])[COND]
    assert p.a_c > 0 and p.beta_c_hat > 0 and p.delta_c > 0


def test_params_round_trip(tmp_path):
    table = {COND: _params(0.3, 0.7, 1.5), ("chain", "qa"): DtiParams(("chain", "qa"), 1.0, math.inf, 1.0)}
    save_params(table, tmp_path / "p.json")
    assert load_params(tmp_path / "p.json") == table


def test_stratified_lookup():
    pooled = _params(0.3, 0.7, 1.5)
    n32 = _params(0.5, 0.7, 1.0, N=32)
    table = {pooled.key: pooled, n32.key: n32}
    assert lookup(table, COND, 32) is n32
    assert lookup(table, COND, 64) is pooled
    assert lookup(table, COND) is pooled
    with pytest.raises(MissingParams):
        lookup({n32.key: n32}, COND, 64)
    with pytest.raises(MissingParams):
        lookup(table, ("chain", "qa"))


def test_stratified_calibration_keys():
    bundles = [run_simulation(SimConfig(N=N, seed=100 + s)) for N in (16, 32) for s in range(2)]
    table = calibrate(bundles, stratify_by_n=True)
    assert set(table) == {(COND, 16), (COND, 32)}
    assert all(p.N == k[1] for k, p in table.items())


# ---------------------------------------------------------------------------
# intervention
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def heavy_params():
    base = [run_simulation(SimConfig(N=N, seed=100 + s, event_mix=HEAVY)) for N in (8, 16, 32, 64, 128)
            for s in range(5)]
    return calibrate(base)


def test_disabled_controller_reproduces_baseline(heavy_params):
    cfg = SimConfig(N=32, seed=7, event_mix=HEAVY)
    treated, rep = run_with_dti(cfg, heavy_params, delta_override=math.inf)
    assert rep.n_triggers == 0
    assert list(iter_lines(treated)) == list(iter_lines(run_simulation(cfg)))


def test_triggers_produce_valid_injected_merges(heavy_params):
    treated, rep = run_with_dti(SimConfig(N=32, seed=1, event_mix=HEAVY), heavy_params)
    assert rep.n_triggers > 0
    assert validate_bundle(treated).ok
    injected = [r for r in treated.records if r.extra.get("dti_injected")]
    assert len(injected) == rep.n_triggers
    assert all(len(r.claim.parent_claim_ids) >= 2 for r in injected)
    assert all(t.deficit > heavy_params[COND].delta_c for t in rep.triggers)
    assert {row["root"] for row in rep.conversion} == {t.root for t in rep.triggers}


def test_balanced_mix_rarely_triggers(heavy_params):
    heavy = balanced = cascades = 0
    for s in range(5):
        heavy += run_with_dti(SimConfig(N=32, seed=s, event_mix=HEAVY), heavy_params)[1].n_triggers
        b, rep = run_with_dti(SimConfig(N=32, seed=s, event_mix=BALANCED), heavy_params)
        balanced += rep.n_triggers
        cascades += len(collect(b).cascade_rows)
    assert balanced / cascades < 0.005
    assert balanced * 5 < heavy


def test_identical_arms_have_zero_deltas():
    b = run_simulation(SimConfig(N=32, seed=3))
    rep = evaluate_intervention(b, b)
    for k, v in rep.deltas().items():
        assert v is None or v == 0, k
    assert set(rep.to_dict()) == {"baseline", "treated", "delta"}
