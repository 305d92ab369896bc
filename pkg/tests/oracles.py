"""Independent reference implementations used only by the tests.

None of these import the package's cost or delay code: the resource table is
rebuilt symbolically with sympy, the inference delay is replayed by a small
discrete-event simulation, and the exhaustive search is a separate recursive
enumerator.
"""

from __future__ import annotations

import heapq
import math

import sympy as sp

# ---------------------------------------------------------------------------
# resource table

_h, _D, _b, _L0, _lam, _tau, _d = sp.symbols("h D b L0 lam tau d", positive=True, integer=True)
_L = _L0 + _lam * _tau

TABLE = {
    "head_mem": 3 * _L * _d * _b + 3 * _D * _d * _b + _lam * _tau * _D * _b,
    "head_flops": 3 * _L * _D * _d + _L**2 * _d,
    "proj_mem": _L * _D * _b,
    "proj_flops": _L * _D**2,
    "ffn_mem": 4 * _L * _D * _b,
    "ffn_flops": 8 * _L * _D**2,
}

_ARGS = (_D, _b, _L0, _lam, _tau, _d)
# polynomials with integer coefficients: evaluating on Python ints stays exact
TABLE_FUNCS = {
    name: sp.lambdify(_ARGS, sp.expand(expr), modules="math") for name, expr in TABLE.items()
}


def table_row(h, D, b, L0, lam, tau):
    d = D // h
    return {name: int(f(D, b, L0, lam, tau, d)) for name, f in TABLE_FUNCS.items()}


# ---------------------------------------------------------------------------
# inference delay by event simulation


class _Server:
    """Serves its jobs strictly in the given order, one at a time."""

    def __init__(self, order):
        self.order = list(order)
        self.ready = {}
        self.busy = False

    def next_job(self):
        return self.order[0] if self.order else None


def event_delay(placement, snapshot, heads, d_model, bytes_per_param, seq, include_tail=False):
    """Replay one interval as events: input arrivals, head compute, head->proj sends.

    ``placement`` lists devices in canonical block order (heads, proj, ffn).
    """
    n_heads = heads
    d = d_model // n_heads
    b = bytes_per_param
    L = seq
    w_in = L * d_model * b
    w_hp = L * d * b
    w_pf = L * d_model * b
    head_flops = 3 * L * d_model * d + L * L * d
    ctrl = [dev.id for dev in snapshot.devices if dev.is_controller][0]
    comp = {dev.id: dev.compute_avail for dev in snapshot.devices}
    bw = snapshot.bandwidth
    proj, ffn = placement[n_heads], placement[n_heads + 1]

    def link_time(nbytes, a, c):
        return 0.0 if a == c else nbytes / bw[a][c]

    compute = {}
    links = {}
    for i in range(n_heads):
        j = placement[i]
        compute.setdefault(j, []).append(i)
        if j != proj:
            links.setdefault(j, []).append(i)
    cpu = {j: _Server(order) for j, order in compute.items()}
    net = {j: _Server(order) for j, order in links.items()}

    events = []
    seq_no = 0

    def push(t, kind, key, job):
        nonlocal seq_no
        heapq.heappush(events, (t, seq_no, kind, key, job))
        seq_no += 1

    for j, order in compute.items():
        arrival = link_time(w_in, ctrl, j)
        for i in order:
            push(arrival, "cpu_ready", j, i)

    at_proj = {}

    def try_start(servers, key, now, kind_done, duration):
        srv = servers[key]
        job = srv.next_job()
        if srv.busy or job is None or job not in srv.ready:
            return
        srv.busy = True
        srv.order.pop(0)
        push(now + duration(job), kind_done, key, job)

    def cpu_time(i):
        return head_flops / comp[placement[i]]

    def send_time(i):
        return w_hp / bw[placement[i]][proj]

    while events:
        t, _, kind, key, job = heapq.heappop(events)
        if kind == "cpu_ready":
            cpu[key].ready[job] = t
            try_start(cpu, key, t, "cpu_done", cpu_time)
        elif kind == "cpu_done":
            cpu[key].busy = False
            if key == proj:
                at_proj[job] = t
            else:
                push(t, "net_ready", key, job)
            try_start(cpu, key, t, "cpu_done", cpu_time)
        elif kind == "net_ready":
            net[key].ready[job] = t
            try_start(net, key, t, "net_done", send_time)
        elif kind == "net_done":
            net[key].busy = False
            at_proj[job] = t
            try_start(net, key, t, "net_done", send_time)

    assert len(at_proj) == n_heads
    total = max(at_proj.values()) + link_time(w_pf, proj, ffn)
    if include_tail:
        total += L * d_model**2 / comp[proj] + 8 * L * d_model**2 / comp[ffn]
    return total


# ---------------------------------------------------------------------------
# exhaustive search, written independently of the package's solver


def block_sizes(heads, d_model, b, L0, lam, tau):
    row = table_row(heads, d_model, b, L0, lam, tau)
    return [row["head_mem"]] * heads + [row["proj_mem"], row["ffn_mem"]]


def brute_force_best(heads, d_model, b, L0, lam, tau, snapshot, prev=None, include_tail=False):
    """Minimum objective over every memory-feasible placement, or None."""
    n = snapshot.size
    nb = heads + 2
    mem = block_sizes(heads, d_model, b, L0, lam, tau)
    mem_prev = block_sizes(heads, d_model, b, L0, lam, tau - 1) if prev is not None else None
    cap = [dev.mem_avail for dev in snapshot.devices]
    seq = L0 + lam * tau
    best = [math.inf]

    def recurse(prefix, used):
        if len(prefix) == nb:
            val = event_delay(prefix, snapshot, heads, d_model, b, seq, include_tail)
            if prev is not None:
                for p, (src, dst) in enumerate(zip(prev, prefix)):
                    if src != dst:
                        val += mem_prev[p] / snapshot.bandwidth[src][dst]
            best[0] = min(best[0], val)
            return
        p = len(prefix)
        for j in range(n):
            if used[j] + mem[p] <= cap[j]:
                used[j] += mem[p]
                recurse(prefix + [j], used)
                used[j] -= mem[p]

    recurse([], [0] * n)
    return None if best[0] == math.inf else best[0]
