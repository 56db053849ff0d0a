"""
Simulated distributed-memory execution.

Workers are isolated execution contexts (threads or forked processes) that
share nothing but message channels: one FIFO per ordered worker pair.  All
collectives are built from point-to-point messages with a fixed rank order,
so every reduction is deterministic.

Vectors over the Lagrange multipliers are stored per patch: each patch keeps
the entries of the multipliers it takes part in.  A multiplier couples
exactly two patches, so accumulation adds exactly two numbers, which is
order independent in floating point.  Dot products and primal reductions
collect one partial result per patch into its own slot and sum the slots in
patch order; the result is therefore bitwise independent of the number of
workers and of the holder layout.
"""
from __future__ import annotations

import json
import pickle
import queue
import threading
import time
import traceback
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .errors import CommunicationError, ConsistencyError, RepresentationError
from .linalg import pcg

__all__ = [
    "RuntimeConfig",
    "WorkerGroup",
    "spawn",
    "Comm",
    "Request",
    "DVector",
    "MultiplierLayout",
    "PrimalLayout",
    "Context",
    "parallel_pcg",
    "contiguous_blocks",
    "dump_message_log",
]


def contiguous_blocks(n: int, q: int) -> list:
    """Split ``range(n)`` into ``q`` contiguous blocks, the first ``n % q`` one larger."""
    sizes = [n // q + (1 if i < n % q else 0) for i in range(q)]
    out, start = [], 0
    for s in sizes:
        out.append(list(range(start, start + s)))
        start += s
    return out


@dataclass(frozen=True)
class RuntimeConfig:
    workers: int = 1
    holders: int = 1
    backend: str = "thread"      # thread | process
    deterministic: bool = True
    timeout: float = 300.0
    limit_blas_threads: bool = True


# ---------------------------------------------------------------------------
# communication

class Request:
    """Handle of a non-blocking operation; ``wait()`` completes it."""

    def __init__(self, fn=None, value=None):
        self._fn = fn
        self._value = value
        self._done = fn is None

    def wait(self):
        if not self._done:
            self._value = self._fn()
            self._done = True
        return self._value

    def test(self) -> bool:
        return self._done


class Comm:
    """Endpoint of one worker."""

    def __init__(self, rank, size, inboxes, outboxes, abort, timeout=300.0):
        self.rank = rank
        self.size = size
        self._in = inboxes      # src -> queue
        self._out = outboxes    # dst -> queue
        self._abort = abort
        self._timeout = timeout
        self._buffer = defaultdict(deque)  # (src, tag) -> payloads
        self._local = defaultdict(deque)
        self._seq = defaultdict(int)
        self.log = []
        self.phase = "setup"

    # point-to-point -------------------------------------------------------
    def send(self, obj, dst: int, tag) -> None:
        if not 0 <= dst < self.size:
            raise CommunicationError(f"invalid destination {dst}")
        if dst == self.rank:
            # intra-worker traffic is a local copy, not a message
            self._local[tag].append(pickle.loads(pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)))
            return
        data = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
        self.log.append({"src": self.rank, "dst": dst, "tag": repr(tag), "nbytes": len(data),
                         "phase": self.phase})
        self._out[dst].put((self.rank, tag, data))

    def recv(self, src: int, tag):
        if src == self.rank:
            if not self._local[tag]:
                raise CommunicationError(f"worker {self.rank}: no local message with tag {tag!r}")
            return self._local[tag].popleft()
        key = (src, tag)
        if self._buffer[key]:
            return pickle.loads(self._buffer[key].popleft())
        deadline = time.monotonic() + self._timeout
        q = self._in[src]
        while True:
            if self._abort.is_set():
                raise CommunicationError(f"worker {self.rank}: group aborted")
            try:
                s, t, data = q.get(timeout=0.05)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise CommunicationError(
                        f"worker {self.rank}: timeout waiting for tag {tag!r} from {src}") from None
                continue
            if t == tag:
                return pickle.loads(data)
            self._buffer[(s, t)].append(data)

    def isend(self, obj, dst: int, tag) -> Request:
        self.send(obj, dst, tag)
        return Request()

    def irecv(self, src: int, tag) -> Request:
        return Request(lambda: self.recv(src, tag))

    def _seq_next(self, name):
        """Sequence number for tags of repeated point-to-point exchanges."""
        self._seq[("p2p", name)] += 1
        return self._seq[("p2p", name)]

    # collectives ------------------------------------------------------------
    def _tag(self, name, ranks):
        key = (name, tuple(ranks))
        self._seq[key] += 1
        return ("coll", name, tuple(ranks), self._seq[key])

    def _ranks(self, ranks):
        return list(range(self.size)) if ranks is None else list(ranks)

    def gather(self, obj, root: int = 0, ranks=None):
        ranks = self._ranks(ranks)
        tag = self._tag("gather", ranks)
        if self.rank != root:
            self.send(obj, root, tag)
            return None
        out = []
        for r in ranks:
            out.append(obj if r == root else self.recv(r, tag))
        return out

    def bcast(self, obj, root: int = 0, ranks=None):
        ranks = self._ranks(ranks)
        tag = self._tag("bcast", ranks)
        if self.rank == root:
            for r in ranks:
                if r != root:
                    self.send(obj, r, tag)
            return obj
        return self.recv(root, tag)

    def reduce(self, obj, root: int = 0, ranks=None, op=None):
        """Left fold over the contributions in rank order."""
        op = _add if op is None else op
        vals = self.gather(obj, root, ranks)
        if vals is None:
            return None
        acc = vals[0]
        for v in vals[1:]:
            acc = op(acc, v)
        return acc

    def allreduce(self, obj, ranks=None, op=None):
        ranks = self._ranks(ranks)
        root = ranks[0]
        return self.bcast(self.reduce(obj, root, ranks, op), root, ranks)

    def allgather(self, obj, ranks=None):
        ranks = self._ranks(ranks)
        root = ranks[0]
        return self.bcast(self.gather(obj, root, ranks), root, ranks)

    def scatter(self, objs, root: int = 0, ranks=None):
        ranks = self._ranks(ranks)
        tag = self._tag("scatter", ranks)
        if self.rank == root:
            mine = None
            for r, o in zip(ranks, objs):
                if r == root:
                    mine = o
                else:
                    self.send(o, r, tag)
            return mine
        return self.recv(root, tag)

    def barrier(self, ranks=None):
        self.allreduce(0, ranks)


def _add(a, b):
    return a + b


def dump_message_log(records, path) -> None:
    """One JSON object per line: src, dst, tag, nbytes, phase."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# worker group

@dataclass
class WorkerGroup:
    """Static description of the workers and of the coarse-problem holders."""

    config: RuntimeConfig
    n_patches: int
    assignment: list                 # worker -> patches
    owner: np.ndarray                # patch -> worker
    neighbors: list                  # worker -> sorted neighbour workers
    holder_groups: list              # list of worker lists; the first entry is the holder
    master: np.ndarray               # worker -> holder

    @property
    def size(self) -> int:
        return self.config.workers

    @property
    def holders(self) -> list:
        return [g[0] for g in self.holder_groups]

    def run(self, fn, *args, **kwargs):
        """
        Run ``fn(comm, group, *args, **kwargs)`` on every worker (SPMD).

        Returns the list of per-worker results and the merged message log.
        The first worker exception is re-raised in the caller.
        """
        if self.config.backend == "thread":
            return _run_threads(self, fn, args, kwargs)
        if self.config.backend == "process":
            return _run_processes(self, fn, args, kwargs)
        raise ValueError(f"unknown backend {self.config.backend!r}")


def spawn(config: RuntimeConfig, n_patches: int, patch_adjacency=()) -> WorkerGroup:
    """
    Assign patches to workers in contiguous blocks and set up holder groups.

    ``patch_adjacency`` lists patch pairs sharing an interface; it defines
    the worker neighbour table.
    """
    Q = int(config.workers)
    if Q < 1:
        raise ValueError("at least one worker required")
    H = int(config.holders)
    if not 1 <= H <= Q:
        raise ValueError(f"holder count must lie in [1, {Q}]")
    assignment = contiguous_blocks(n_patches, Q)
    owner = np.empty(n_patches, dtype=int)
    for q, ps in enumerate(assignment):
        owner[ps] = q
    nb = [set() for _ in range(Q)]
    for a, b in patch_adjacency:
        qa, qb = owner[a], owner[b]
        if qa != qb:
            nb[qa].add(qb)
            nb[qb].add(qa)
    groups = contiguous_blocks(Q, H)
    master = np.empty(Q, dtype=int)
    for g in groups:
        master[g] = g[0]
    return WorkerGroup(config, n_patches, assignment, owner, [sorted(s) for s in nb], groups, master)


def _limit_blas():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(1)
    except ImportError:  # pragma: no cover
        return None


def _run_threads(group, fn, args, kwargs):
    Q = group.size
    boxes = {(s, d): queue.Queue() for s in range(Q) for d in range(Q) if s != d}
    abort = threading.Event()
    results = [None] * Q
    errors = [None] * Q
    comms = []
    for q in range(Q):
        inb = {s: boxes[(s, q)] for s in range(Q) if s != q}
        outb = {d: boxes[(q, d)] for d in range(Q) if d != q}
        comms.append(Comm(q, Q, inb, outb, abort, group.config.timeout))

    def body(q):
        try:
            results[q] = fn(comms[q], group, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the caller
            errors[q] = exc
            abort.set()

    limiter = _limit_blas() if group.config.limit_blas_threads else None
    try:
        threads = [threading.Thread(target=body, args=(q,), daemon=True) for q in range(Q)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    _raise_first(errors)
    log = [r for c in comms for r in c.log]
    return results, log


def _raise_first(errors):
    # prefer the root cause over follow-up abort errors of other workers
    real = [e for e in errors if e is not None and not isinstance(e, CommunicationError)]
    comm = [e for e in errors if isinstance(e, CommunicationError)]
    if real:
        raise real[0]
    if comm:
        raise comm[0]


def _process_body(q, Q, boxes, abort, out, timeout, fn, group, args, kwargs, limit):
    if limit:
        _limit_blas()
    inb = {s: boxes[(s, q)] for s in range(Q) if s != q}
    outb = {d: boxes[(q, d)] for d in range(Q) if d != q}
    comm = Comm(q, Q, inb, outb, abort, timeout)
    try:
        res = fn(comm, group, *args, **kwargs)
        out.put((q, "ok", pickle.dumps((res, comm.log))))
    except BaseException as exc:  # noqa: BLE001
        abort.set()
        try:
            payload = pickle.dumps(exc)
        except Exception:  # unpicklable exception
            payload = pickle.dumps(CommunicationError(f"worker {q} failed: {exc!r}"))
        out.put((q, "err", payload, traceback.format_exc()))


def _run_processes(group, fn, args, kwargs):
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    Q = group.size
    boxes = {(s, d): ctx.Queue() for s in range(Q) for d in range(Q) if s != d}
    abort = ctx.Event()
    out = ctx.Queue()
    procs = [ctx.Process(target=_process_body,
                         args=(q, Q, boxes, abort, out, group.config.timeout, fn, group, args, kwargs,
                               group.config.limit_blas_threads), daemon=True)
             for q in range(Q)]
    for p in procs:
        p.start()
    results = [None] * Q
    logs = [[] for _ in range(Q)]
    errors = [None] * Q
    pending = Q
    deadline = time.monotonic() + group.config.timeout * 4
    while pending:
        try:
            msg = out.get(timeout=0.1)
        except queue.Empty:
            if time.monotonic() > deadline:
                abort.set()
                break
            dead = [q for q, p in enumerate(procs) if not p.is_alive() and p.exitcode not in (0, None)]
            if dead and all(results[q] is None and errors[q] is None for q in dead):
                # a worker died without reporting
                errors[dead[0]] = CommunicationError(f"worker {dead[0]} died (exit code {procs[dead[0]].exitcode})")
                abort.set()
                pending -= 1
            continue
        q, status, payload = msg[0], msg[1], msg[2]
        if status == "ok":
            results[q], logs[q] = pickle.loads(payload)
        else:
            err = pickle.loads(payload)
            if hasattr(err, "add_note") and len(msg) > 3:
                err.add_note(msg[3])
            errors[q] = err
        pending -= 1
    for p in procs:
        p.join(timeout=5)
        if p.is_alive():
            p.terminate()
    _raise_first(errors)
    if any(r is None for r in results) and not any(errors):
        raise CommunicationError("worker group did not finish in time")
    return results, [r for l in logs for r in l]


# ---------------------------------------------------------------------------
# distributed vectors

class DVector:
    """
    Vector over the multipliers, stored per local patch.

    ``rep`` is ``"acc"`` (each patch holds the full value of its entries)
    or ``"dist"`` (the global value is the sum over the patches holding it).
    """

    __slots__ = ("rep", "segs")

    def __init__(self, rep: str, segs: dict):
        if rep not in ("acc", "dist"):
            raise RepresentationError(f"unknown representation {rep!r}")
        self.rep = rep
        self.segs = segs

    def _check(self, other):
        if not isinstance(other, DVector):
            return NotImplemented
        if other.rep != self.rep:
            raise RepresentationError(f"cannot combine {self.rep} and {other.rep} vectors")
        return None

    def __add__(self, other):
        self._check(other)
        return DVector(self.rep, {k: v + other.segs[k] for k, v in self.segs.items()})

    def __sub__(self, other):
        self._check(other)
        return DVector(self.rep, {k: v - other.segs[k] for k, v in self.segs.items()})

    def __mul__(self, s):
        return DVector(self.rep, {k: v * s for k, v in self.segs.items()})

    __rmul__ = __mul__

    def copy(self):
        return DVector(self.rep, {k: v.copy() for k, v in self.segs.items()})

    def __repr__(self):
        return f"DVector({self.rep}, patches={sorted(self.segs)})"


@dataclass
class MultiplierLayout:
    """Which multiplier entries each local patch shares with which other patch."""

    patch_rows: dict        # local patch -> global multiplier ids
    pairs: dict             # (k, o) -> (positions in k, positions in o), k local
    n_patches: int

    @classmethod
    def build(cls, patch_rows_all, local_patches):
        n = len(patch_rows_all)
        where = {}
        for k, rows in enumerate(patch_rows_all):
            for j, r in enumerate(rows):
                where.setdefault(int(r), []).append((k, j))
        pairs = {}
        for k in local_patches:
            per_other = defaultdict(lambda: ([], []))
            for j, r in enumerate(patch_rows_all[k]):
                for o, jo in where[int(r)]:
                    if o != k:
                        per_other[o][0].append(j)
                        per_other[o][1].append(jo)
            for o, (jk, jo) in sorted(per_other.items()):
                pairs[(k, o)] = (np.array(jk, dtype=int), np.array(jo, dtype=int))
        return cls({k: np.asarray(patch_rows_all[k]) for k in local_patches}, pairs, n)

    def split(self, v_global, rep="acc"):
        """Local segments of a global array (accumulated) or an owner split (distributed)."""
        segs = {k: np.asarray(v_global, dtype=float)[rows].copy() for k, rows in self.patch_rows.items()}
        if rep == "dist":
            # the lower patch of each pair carries the value, the other one zero
            for (k, o), (jk, _) in self.pairs.items():
                if o < k:
                    segs[k][jk] = 0.0
        return DVector(rep, segs)


@dataclass
class PrimalLayout:
    n_primal: int
    slots: dict              # local patch -> slot index per local primal
    max_multiplicity: int
    needed: dict             # worker -> sorted primal ids used by its patches


class Context:
    """Collective operations of one worker on multiplier and primal vectors."""

    def __init__(self, comm: Comm, group: WorkerGroup, mlayout: MultiplierLayout,
                 primal_idx: dict | None = None, playout: PrimalLayout | None = None):
        self.comm = comm
        self.group = group
        self.ml = mlayout
        self.primal_idx = primal_idx or {}
        self.pl = playout
        self.local_patches = list(group.assignment[comm.rank])
        self.deterministic = group.config.deterministic

    # multiplier vectors -----------------------------------------------------
    def accumulate(self, v: DVector) -> DVector:
        if v.rep != "dist":
            raise RepresentationError("accumulate expects a distributed vector")
        comm, owner = self.comm, self.group.owner
        tag = ("acc", comm._seq_next("acc"))
        out_msgs = defaultdict(dict)
        for (k, o), (jk, _) in self.ml.pairs.items():
            q = owner[o]
            if q != comm.rank:
                out_msgs[q][(k, o)] = v.segs[k][jk]
        for q in sorted(out_msgs):
            comm.send(out_msgs[q], q, tag)
        received = {}
        for q in sorted({owner[o] for (_, o) in self.ml.pairs} - {comm.rank}):
            received.update(comm.recv(q, tag))
        segs = {k: s.copy() for k, s in v.segs.items()}
        for (k, o), (jk, jo) in self.ml.pairs.items():
            other = v.segs[o][jo] if o in v.segs else received[(o, k)]
            # exactly two contributions per entry: a + b == b + a
            segs[k][jk] = v.segs[k][jk] + other
        return DVector("acc", segs)

    def ddot(self, u: DVector, v: DVector) -> float:
        if {u.rep, v.rep} != {"acc", "dist"}:
            raise RepresentationError("ddot needs one distributed and one accumulated operand")
        if self.deterministic:
            part = np.zeros(self.ml.n_patches)
            for k in self.local_patches:
                part[k] = float(np.dot(u.segs[k], v.segs[k]))
            tot = self.comm.allreduce(part)
            s = 0.0
            for x in tot:
                s += x
            return s
        part = 0.0
        for k in self.local_patches:
            part += float(np.dot(u.segs[k], v.segs[k]))
        return float(self.comm.allreduce(part))

    # primal vectors -----------------------------------------------------------
    def _group(self):
        m = int(self.group.master[self.comm.rank])
        for g in self.group.holder_groups:
            if g[0] == m:
                return g
        raise CommunicationError("worker without holder group")

    def reduce_primal(self, contributions: dict):
        """
        Sum the per-patch primal contributions onto the holders.

        ``contributions[k]`` holds the values of ``primal_idx[k]``.  Returns
        the global vector on holders and ``None`` elsewhere.
        """
        pl, comm = self.pl, self.comm
        group = self._group()
        holders = self.group.holders
        if self.deterministic:
            local = np.zeros((max(pl.max_multiplicity, 1), pl.n_primal))
            for k, vals in contributions.items():
                local[pl.slots[k], self.primal_idx[k]] = vals
        else:
            local = np.zeros(pl.n_primal)
            for k, vals in contributions.items():
                np.add.at(local, self.primal_idx[k], vals)
        if len(holders) == self.group.size:
            total = comm.allreduce(local)
        else:
            part = comm.reduce(local, group[0], group)
            total = comm.allreduce(part, holders) if comm.rank in holders else None
        if total is None:
            return None
        if not self.deterministic:
            return total
        f = total[0].copy()
        for s in range(1, total.shape[0]):
            f = f + total[s]
        return f

    def scatter_primal(self, w_pi, check: bool = False) -> np.ndarray:
        """Deliver the holder's global primal vector to the workers of its group."""
        comm = self.comm
        group = self._group()
        if check and len(self.group.holders) > 1:
            ref = comm.allgather(w_pi if comm.rank in self.group.holders else None)
            vals = [x for x in ref if x is not None]
            if any(not np.array_equal(vals[0], x) for x in vals[1:]):
                raise ConsistencyError("holders disagree on the coarse solution")
        if len(group) == 1:
            return w_pi
        tag = ("scatter_primal", comm._seq_next("scatter_primal"))
        full = np.zeros(self.pl.n_primal)
        if comm.rank == group[0]:
            for q in group[1:]:
                ids = self.pl.needed[q]
                comm.send(w_pi[ids], q, tag)
            return w_pi
        ids = self.pl.needed[comm.rank]
        full[ids] = comm.recv(group[0], tag)
        return full


def parallel_pcg(ctx: Context, applyF, applyM, d: DVector, tol: float = 1e-8, maxit: int = 500):
    """PCG on distributed multiplier vectors; ``d`` is distributed, ``lam`` accumulated."""
    return pcg(applyF, applyM, d, tol=tol, maxit=maxit, dot=ctx.ddot, accumulate=ctx.accumulate)
