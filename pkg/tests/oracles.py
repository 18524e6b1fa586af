"""Independent reference implementations used by the test suites.

Nothing here imports the estimator, tuner or partitioner; the cost formulas
are rewritten from their definitions (same arithmetic order, so results can be
compared bit for bit) and every search is plain exhaustive enumeration.
"""

from __future__ import annotations

import heapq
import itertools
import math

# ---- communication ---------------------------------------------------------


def interp(base, xs, ys, v):
    if v <= 0:
        return base
    px, py = [0.0] + list(xs), [base] + list(ys)
    for k in range(1, len(px)):
        if v == px[k]:
            return py[k]
        if v < px[k]:
            x0, x1, y0, y1 = px[k - 1], px[k], py[k - 1], py[k]
            return y0 + (y1 - y0) * (v - x0) / (x1 - x0)
    x0, x1, y0, y1 = px[-2], px[-1], py[-2], py[-1]
    return y0 + (y1 - y0) * (v - x0) / (x1 - x0)


def comm(profile, link, collective, volume, p):
    table = profile.overrides.get((link, collective)) or profile.links[link]
    if collective == "all_reduce":
        volume = 2.0 * (p - 1) / p * volume
    elif collective == "all_gather":
        volume = (p - 1) / p * volume
    return interp(table.base_latency, table.volumes, table.latencies, volume)


# ---- plan cost --------------------------------------------------------------


def _placements(gs, gpn):
    out, off, prev = [], 0, None
    for g in gs:
        a, b = off // gpn, (off + g - 1) // gpn
        one = a == b
        out.append((one, one and prev == a))
        prev = a if one else None
        off += g
    return out


def plan_cost(cell, plan, group, profile, cfg):
    """(latency, per-stage memory, feasible) of one (dp, tp) per stage plan."""
    gpu = group.gpu
    S = len(cell.stages)
    B = cfg.microbatch_factor * S
    gbs = cell.model.global_batch_size
    gpn = group.gpus_per_node
    intra_l, inter_l = group.intra_node_link, group.inter_node_link
    places = _placements([st.assigned_gpus for st in cell.stages], gpn)
    T, C, syncs, mems, ok = [], [], [], [], True
    for i, (st, (dp, tp)) in enumerate(zip(cell.stages, plan)):
        one_node, inbound_intra = places[i]
        mbs = gbs / (dp * B)
        speed = tp * gpu.peak_flops * gpu.compute_efficiency * cfg.tp_alpha ** math.log2(tp)
        compute = st.flops_per_sample * mbs / speed
        tp_link = intra_l if tp <= gpn else inter_l
        intra = 0.0
        if tp > 1:
            intra = comm(profile, tp_link, "all_reduce",
                         st.activation_bytes_per_sample * mbs * cfg.k_tp_msgs, tp)
        inbound = 0.0
        if i > 0:
            vol = st.inbound_boundary_bytes_per_sample * mbs
            inbound = comm(profile, intra_l if inbound_intra else inter_l, "send_recv", vol, 2)
            g_tp = tp if tp > 1 else plan[i - 1][1]
            if g_tp > 1:
                inbound += comm(profile, intra_l if g_tp <= gpn else inter_l, "all_gather", vol, g_tp)
        sync = 0.0
        if dp > 1:
            sync = comm(profile, intra_l if one_node else inter_l, "all_reduce",
                        st.param_bytes / tp, dp)
        mem = st.param_bytes * cfg.k_state / tp + st.activation_bytes_per_sample * mbs * S / tp
        T.append(compute + intra + inbound)
        C.append(inbound)
        syncs.append(sync)
        mems.append(mem)
        ok = ok and mbs >= 1 and mem <= gpu.memory
    total, steady = 0.0, -math.inf
    for t, c in zip(T, C):
        total = total + t
        steady = max(steady, t - c)
    return total + (B - 1) * steady + max(syncs), mems, ok


def _pure(g):
    return [(1, 1)] if g == 1 else [(g, 1), (1, g)]


def _full(g):
    out, dp = [], g
    while dp >= 1:
        out.append((dp, g // dp))
        dp //= 2
    return out


def _argbest(rows):
    # rows: (index, plan, latency, feasible); min latency, then fewest tp, then index
    feas = [r for r in rows if r[3]]
    if not feas:
        return None
    return min(feas, key=lambda r: (r[2], sum(tp for _, tp in r[1]), r[0]))


def brute_force_estimate(cell, group, profile, cfg):
    """Best of all 2^N_S pure dp/tp assemblies, or None when none fits."""
    spaces = [_pure(st.assigned_gpus) for st in cell.stages]
    rows = []
    for k, plan in enumerate(itertools.product(*spaces)):
        lat, _, ok = plan_cost(cell, plan, group, profile, cfg)
        rows.append((k, plan, lat, ok))
    best = _argbest(rows)
    return None if best is None else (best[1], best[2], len(rows))


def brute_force_unpruned(cell, group, profile, cfg):
    spaces = [_full(st.assigned_gpus) for st in cell.stages]
    rows = []
    for k, plan in enumerate(itertools.product(*spaces)):
        lat, _, ok = plan_cost(cell, plan, group, profile, cfg)
        rows.append((k, plan, lat, ok))
    best = _argbest(rows)
    return None if best is None else (best[1], best[2], len(rows))


# ---- pipeline ----------------------------------------------------------------


def gpipe_event_sim(busy, inbound, n_microbatches, dp_sync=0.0):
    """Makespan of B microbatches through sequential stages.

    Stage i holds its device for ``busy[i]`` per microbatch; ``inbound[i]`` is
    a transfer delay from stage i-1 that does not occupy either device.  Each
    stage serves microbatches in order, one at a time.
    """
    S = len(busy)
    free_at = [0.0] * S
    heap = [(0.0, 0, m) for m in range(n_microbatches)]  # (ready, stage, microbatch)
    heapq.heapify(heap)
    next_mb = [0] * S
    waiting = [dict() for _ in range(S)]
    end = 0.0
    while heap:
        ready, i, m = heapq.heappop(heap)
        waiting[i][m] = ready
        while next_mb[i] in waiting[i]:
            mb = next_mb[i]
            start = max(waiting[i].pop(mb), free_at[i])
            finish = start + busy[i]
            free_at[i] = finish
            next_mb[i] += 1
            if i + 1 < S:
                heapq.heappush(heap, (finish + inbound[i + 1], i + 1, mb))
            else:
                end = max(end, finish)
    return end + dp_sync


# ---- partitioning ----------------------------------------------------------------


def brute_force_boundaries(flops, traffic, k):
    """Cut set among the k smallest-traffic gaps: min max-stage FLOPs, then earliest."""
    n = len(flops)
    if k == 0:
        return ()
    want = sorted(traffic)[:k]
    best = None
    for cuts in itertools.combinations(range(n - 1), k):
        if sorted(traffic[c] for c in cuts) != want:
            continue
        bounds = [-1] + list(cuts) + [n - 1]
        worst = max(math.fsum(flops[a + 1:b + 1]) for a, b in zip(bounds, bounds[1:]))
        key = (worst, cuts)
        if best is None or key < best:
            best = key
    return best[1]


def round_and_repair(fracs, flops, n_gpus):
    """Nearest power of two per stage (ties up), then halve/double until the sum is n_gpus."""
    def near(x):
        if x <= 1:
            return 1
        p = 1
        while p * 2 <= x:
            p *= 2
        return p * 2 if p * 2 - x <= x - p else p

    g = [near(f) for f in fracs]
    while sum(g) > n_gpus:
        over = sum(g) - n_gpus
        pool = [i for i in range(len(g)) if g[i] >= 2 and g[i] // 2 <= over] or \
               [i for i in range(len(g)) if g[i] >= 2]
        i = min(pool, key=lambda i: (flops[i] / g[i], i))
        g[i] //= 2
    while sum(g) < n_gpus:
        short = n_gpus - sum(g)
        pool = [i for i in range(len(g)) if g[i] <= short]
        i = max(pool, key=lambda i: (flops[i] / g[i], -i))
        g[i] *= 2
    return g


def balance_ratio(flops, n_gpus, cuts):
    """max/min FLOPs-per-GPU of the stages cut after each index in ``cuts``."""
    total = math.fsum(flops)
    bounds = [-1] + list(cuts) + [len(flops) - 1]
    seg = [(a + 1, b + 1) for a, b in zip(bounds, bounds[1:])]
    sf = [math.fsum(flops[a:b]) for a, b in seg]
    sfrac = [math.fsum(n_gpus * f / total for f in flops[a:b]) for a, b in seg]
    g = round_and_repair(sfrac, sf, n_gpus)
    per = [f / x for f, x in zip(sf, g)]
    return max(per) / min(per)
