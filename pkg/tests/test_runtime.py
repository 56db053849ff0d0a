import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ietidp.errors import CommunicationError, RepresentationError
from ietidp.harness.driver import CaseConfig, build_case, solve_distributed
from ietidp.runtime import (
    Context,
    DVector,
    MultiplierLayout,
    PrimalLayout,
    RuntimeConfig,
    contiguous_blocks,
    dump_message_log,
    spawn,
)

BACKENDS = ["thread", "process"]


def test_contiguous_blocks():
    assert contiguous_blocks(5, 2) == [[0, 1, 2], [3, 4]]
    assert contiguous_blocks(3, 3) == [[0], [1], [2]]
    assert contiguous_blocks(2, 4) == [[0], [1], [], []]


@given(st.integers(0, 50), st.integers(1, 9))
def test_blocks_partition(n, q):
    blocks = contiguous_blocks(n, q)
    assert sum(blocks, []) == list(range(n))
    assert max(map(len, blocks)) - min(map(len, blocks)) <= 1


def test_spawn_layout():
    g = spawn(RuntimeConfig(workers=4, holders=2), 6, [(0, 1), (1, 2), (2, 3), (4, 5), (0, 5)])
    assert g.assignment == [[0, 1], [2, 3], [4], [5]]
    assert g.holders == [0, 2]
    assert g.master.tolist() == [0, 0, 2, 2]
    assert g.neighbors[0] == [1, 3]
    with pytest.raises(ValueError):
        spawn(RuntimeConfig(workers=2, holders=3), 4)
    with pytest.raises(ValueError):
        spawn(RuntimeConfig(workers=0), 4)


# ---------------------------------------------------------------------------
# collectives

def _collectives(comm, group):
    r = comm.rank
    out = {}
    out["gather"] = comm.gather(r * 10, root=min(1, comm.size - 1))
    out["bcast"] = comm.bcast("x" if r == 0 else None, root=0)
    out["reduce"] = comm.reduce(np.array([r, 1.0]), root=0)
    out["allreduce"] = comm.allreduce(r + 1)
    out["allgather"] = comm.allgather(r)
    out["scatter"] = comm.scatter([f"s{q}" for q in range(comm.size)] if r == 0 else None, root=0)
    out["sub"] = comm.allreduce(1, ranks=[0, comm.size - 1]) if r in (0, comm.size - 1) else None
    # ring exchange with non-blocking calls
    nxt, prv = (r + 1) % comm.size, (r - 1) % comm.size
    req = comm.irecv(prv, "ring")
    comm.isend(np.full(3, r), nxt, "ring").wait()
    out["ring"] = req.wait()
    comm.barrier()
    return out


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("Q", [1, 3])
def test_collectives(backend, Q):
    g = spawn(RuntimeConfig(workers=Q, backend=backend), Q)
    res, log = g.run(_collectives)
    assert [r["bcast"] for r in res] == ["x"] * Q
    assert res[min(1, Q - 1)]["gather"] == ([q * 10 for q in range(Q)] if Q > 1 else [0])
    np.testing.assert_array_equal(res[0]["reduce"], [sum(range(Q)), Q])
    assert all(r["allreduce"] == Q * (Q + 1) // 2 for r in res)
    assert all(r["allgather"] == list(range(Q)) for r in res)
    assert [r["scatter"] for r in res] == [f"s{q}" for q in range(Q)]
    for q, r in enumerate(res):
        np.testing.assert_array_equal(r["ring"], np.full(3, (q - 1) % Q))
    for rec in log:
        assert set(rec) >= {"src", "dst", "tag", "nbytes", "phase"}
        assert rec["src"] != rec["dst"] and rec["nbytes"] > 0


def _fail(comm, group):
    if comm.rank == 1:
        raise ValueError("boom")
    comm.recv(1, "never")


def _deadlock(comm, group):
    comm.recv((comm.rank + 1) % comm.size, "never")


@pytest.mark.parametrize("backend", BACKENDS)
def test_worker_exception_propagates(backend):
    g = spawn(RuntimeConfig(workers=2, backend=backend, timeout=20), 2)
    with pytest.raises(ValueError, match="boom"):
        g.run(_fail)


@pytest.mark.parametrize("backend", BACKENDS)
def test_timeout_raises(backend):
    g = spawn(RuntimeConfig(workers=2, backend=backend, timeout=0.5), 2)
    with pytest.raises(CommunicationError):
        g.run(_deadlock)


def _bad_send(comm, group):
    comm.send(1, 5, "x")


def test_invalid_destination():
    with pytest.raises(CommunicationError):
        spawn(RuntimeConfig(workers=2), 2).run(_bad_send)


def test_message_log_dump(tmp_path):
    g = spawn(RuntimeConfig(workers=2), 2)
    _, log = g.run(_collectives)
    path = tmp_path / "log.json"
    dump_message_log(log, path)
    import json

    lines = path.read_text().splitlines()
    assert len(lines) == len(log)
    assert json.loads(lines[0])["src"] == log[0]["src"]


# ---------------------------------------------------------------------------
# distributed multiplier vectors

def _chain_rows(n_patches, n_shared, rng):
    """Multipliers shared by consecutive patches and by patch 0 with the last one."""
    rows = [[] for _ in range(n_patches)]
    m = 0
    for k in range(n_patches):
        for _ in range(n_shared):
            o = (k + 1) % n_patches
            rows[k].append(m)
            rows[o].append(m)
            m += 1
    return [np.array(sorted(r)) for r in rows], m


def _acc_worker(comm, group, rows, contribs, u_acc):
    mine = group.assignment[comm.rank]
    ctx = Context(comm, group, MultiplierLayout.build(rows, mine))
    d = DVector("dist", {k: contribs[k] for k in mine})
    a = ctx.accumulate(d)
    ua = DVector("acc", {k: u_acc[rows[k]] for k in mine})
    return a.segs, ctx.ddot(d, ua)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("Q", [1, 2, 4])
def test_accumulate_and_ddot_against_serial_oracle(backend, Q, rng):
    n = 5
    rows, m = _chain_rows(n, 3, rng)
    contribs = [rng.standard_normal(r.size) for r in rows]
    u_acc = rng.standard_normal(m)
    # serial gather-sum oracle
    total = np.zeros(m)
    for r, c in zip(rows, contribs):
        np.add.at(total, r, c)
    g = spawn(RuntimeConfig(workers=Q, backend=backend), n)
    res, _ = g.run(_acc_worker, rows, contribs, u_acc)
    for segs, dot in res:
        for k, s in segs.items():
            np.testing.assert_allclose(s, total[rows[k]], rtol=1e-15)
        assert dot == pytest.approx(total @ u_acc, rel=1e-13)
    assert len({dot for _, dot in res}) == 1


def test_ddot_is_bitwise_independent_of_workers(rng):
    n = 6
    rows, m = _chain_rows(n, 4, rng)
    contribs = [rng.standard_normal(r.size) * 10.0 ** rng.integers(-8, 8) for r in rows]
    u_acc = rng.standard_normal(m)
    dots = set()
    for Q in (1, 2, 3, 6):
        res, _ = spawn(RuntimeConfig(workers=Q), n).run(_acc_worker, rows, contribs, u_acc)
        dots.update(d for _, d in res)
        segs = {}
        for s, _ in res:
            segs.update(s)
        if Q == 1:
            ref = segs
        for k in ref:
            np.testing.assert_array_equal(segs[k], ref[k])
    assert len(dots) == 1


def test_representation_errors():
    a = DVector("acc", {0: np.ones(2)})
    d = DVector("dist", {0: np.ones(2)})
    with pytest.raises(RepresentationError):
        a + d
    with pytest.raises(RepresentationError):
        DVector("both", {})
    g = spawn(RuntimeConfig(workers=1), 1)
    from types import SimpleNamespace

    ctx = Context(SimpleNamespace(rank=0), g, MultiplierLayout.build([np.arange(2)], [0]))
    with pytest.raises(RepresentationError):
        ctx.accumulate(a)
    with pytest.raises(RepresentationError):
        ctx.ddot(a, a)
    np.testing.assert_array_equal((2.0 * (a - a * 0.5)).segs[0], [1.0, 1.0])


# ---------------------------------------------------------------------------
# primal reductions

def _primal_worker(comm, group, local, slots, vals, n_primal, maxmult):
    mine = group.assignment[comm.rank]
    needed = {q: np.array(sorted({int(i) for k in group.assignment[q] for i in local[k]}), dtype=int)
              for q in range(group.size)}
    pl = PrimalLayout(n_primal, {k: slots[k] for k in mine}, maxmult, needed)
    ctx = Context(comm, group, MultiplierLayout.build([np.zeros(0, int)] * len(local), mine),
                  {k: local[k] for k in mine}, pl)
    f = ctx.reduce_primal({k: vals[k] for k in mine})
    w = ctx.scatter_primal(None if f is None else 2.0 * f, check=True)
    return f, {k: w[local[k]] for k in mine}


@pytest.mark.parametrize("Q,H", [(1, 1), (4, 1), (4, 2), (4, 4), (3, 2)])
def test_reduce_and_scatter_primal(Q, H, rng):
    n_patches, n_primal = 5, 4
    local = [np.array(sorted(rng.choice(n_primal, 2, replace=False))) for _ in range(n_patches)]
    holders_of = {i: [k for k in range(n_patches) if i in local[k]] for i in range(n_primal)}
    slots = [np.array([holders_of[i].index(k) for i in local[k]]) for k in range(n_patches)]
    maxmult = max(len(v) for v in holders_of.values())
    vals = [rng.standard_normal(2) for _ in range(n_patches)]
    ref = np.zeros(n_primal)
    for i in range(n_primal):
        for k in holders_of[i]:
            ref[i] += vals[k][list(local[k]).index(i)]
    g = spawn(RuntimeConfig(workers=Q, holders=H), n_patches)
    res, _ = g.run(_primal_worker, local, slots, vals, n_primal, maxmult)
    for q, (f, w) in enumerate(res):
        if q in g.holders:
            np.testing.assert_allclose(f, ref, rtol=1e-15)
        else:
            assert f is None
        for k, wk in w.items():
            np.testing.assert_allclose(wk, 2.0 * ref[local[k]], rtol=1e-15)


# ---------------------------------------------------------------------------
# end-to-end invariance

@pytest.mark.parametrize("form", ["cg", "dg"])
def test_distributed_solution_is_bitwise_invariant(form):
    base = CaseConfig(patches=(2, 2), degree=2, refine=2, form=form)
    disc = build_case(base)
    ref = None
    for Q, H, backend in [(1, 1, "thread"), (2, 1, "thread"), (4, 2, "thread"), (4, 4, "process")]:
        cfg = CaseConfig(patches=(2, 2), degree=2, refine=2, form=form, workers=Q, holders=H, backend=backend)
        out = solve_distributed(disc, cfg)
        if ref is None:
            ref = out
            continue
        np.testing.assert_array_equal(out.u, ref.u)
        np.testing.assert_array_equal(out.lam, ref.lam)
        assert out.report.residuals == ref.report.residuals


def test_messages_only_between_neighbours_or_holders():
    cfg = CaseConfig(patches=(4, 1), degree=2, refine=1, workers=4, holders=1)
    disc = build_case(cfg)
    out = solve_distributed(disc, cfg)
    solving = [m for m in out.messages if m["phase"] == "solving"]
    assert solving
    assert {m["phase"] for m in out.messages} <= {"setup", "assembling", "solving"}
