"""Compiled kernels for scenario stepping, particle rollouts and tree search.

The kernels never evaluate lattice edges themselves.  They read the
feasibility status grid (0 unknown, 1 feasible, 2 infeasible) and return
``NEED`` with the offending ``(ix, iy, action)`` whenever an unknown edge
would be used; the caller evaluates it and calls again.  Every mutation of
the tree happens after all required edges are known, so a paused call
leaves the tree untouched and resuming simply repeats deterministic work.
"""
from __future__ import annotations

import numpy as np
from numba import njit

DONE = 0
NEED = 1

# meta slots of the search state
M_NODES = 0
M_POOL = 1
M_TRIALS = 2
M_NEED_X = 3
M_NEED_Y = 4
M_NEED_A = 5
M_STALLED = 6
N_META = 7


@njit(cache=True)
def _next_state(indptr, indices, cum, s, a, u):
    # first k with cum[k] > u (inverse CDF, searchsorted side="right")
    lo = indptr[a, s]
    hi = indptr[a, s + 1]
    for k in range(lo, hi - 1):
        if u < cum[k]:
            return indices[k]
    return indices[hi - 1]


@njit(cache=True)
def _observe(omega_cum, a, s, u):
    for o in range(3):
        if u < omega_cum[a, s, o]:
            return o
    return 3


@njit(cache=True)
def _lift_choice(score, feas, x, y, window):
    """Highest-scoring action with a known-feasible edge out of (x, y).

    Returns ``(action, status)``: status 1 feasible, 2 when every edge is
    infeasible (action is then the unfiltered argmax), 0 when an unknown
    edge must be evaluated first (action names it).
    """
    A = score.shape[0]
    tried = np.zeros(A, np.bool_)
    first = -1
    for _ in range(A):
        best = -1
        for a in range(A):
            if not tried[a] and (best < 0 or score[a] > score[best]):
                best = a
        if first < 0:
            first = best
        st = feas[x + window, y + window, best]
        if st == 0:
            return best, 0
        if st == 1:
            return best, 1
        tried[best] = True
    return first, 2


@njit(cache=True)
def step_batch(states, ids, t, psi, a, rx, ry, edge_ok, lat, indptr, indices, cum, omega_cum,
               reward, steps, ny, out, invalid, collide, window):
    """Advance a node's scenarios by action ``a``.  Returns (states', obs, rewards)."""
    n = states.shape[0]
    nxt = np.empty(n, np.int64)
    obs = np.empty(n, np.int64)
    rew = np.empty(n, np.float64)
    nrx = rx + steps[a, 0]
    nry = ry + steps[a, 1]
    for i in range(n):
        s = states[i]
        u1 = psi[ids[i], t, 0]
        u2 = psi[ids[i], t, 1]
        if lat and (s == invalid or not edge_ok):
            nxt[i] = invalid
            obs[i] = min(int(u2 * 4.0), 3)
            rew[i] = -1.0
            continue
        s2 = _next_state(indptr, indices, cum, s, a, u1)
        o = _observe(omega_cum, a, s2, u2)
        r = reward[s]
        if lat:
            if s2 == out:
                s2 = invalid
                r = -1.0
            else:
                gi = nrx + s2 // ny + window
                gj = nry + s2 % ny + window
                if collide[gi, gj]:
                    s2 = invalid
                    r = -1.0
        nxt[i] = s2
        obs[i] = o
        rew[i] = r
    return nxt, obs, rew


@njit(cache=True)
def rollout(states, ids, t0, max_depth, rx, ry, psi, gamma, lat, indptr, indices, cum, omega_cum,
            det_next, det_obs, reward, Q, steps, ny, out, invalid, collide, feas, window, need):
    """Particle-QMDP rollout (Lift-filtered on a lattice model).

    Scenarios that share an observation history form a group; each group
    takes argmax_a of its summed Q over still-valid members, so the
    rollout is a history-dependent policy.  Absorbing failures contribute
    the exact tail ``-gamma^k / (1 - gamma)``; the horizon truncates
    without a tail.  Returns ``(status, mean value)``; on ``NEED`` the edge
    is written to ``need`` and the value is meaningless.

    Scenarios in the same state and group are carried by one leader
    (``weight`` members) for as long as transitions and observations are
    deterministic, which leaves the result unchanged.
    """
    n = states.shape[0]
    A = steps.shape[0]
    tail = -1.0 / (1.0 - gamma)
    cur = states.copy()
    alive = np.ones(n, np.bool_)
    grp = np.zeros(n, np.int64)
    nxt = np.full(n, -1, np.int64)  # member chains: leader, nxt[leader], ...
    last = np.arange(n)
    weight = np.ones(n, np.int64)
    grx = np.empty(n, np.int64)
    gry = np.empty(n, np.int64)
    grx[0] = rx
    gry[0] = ry
    n_groups = 1
    acc = 0.0
    first = np.full(invalid + 1, -1, np.int64)
    for i in range(n):
        if cur[i] == out or cur[i] == invalid:
            alive[i] = False
            acc += tail
            continue
        f = first[cur[i]]
        if f < 0:
            first[cur[i]] = i
        else:
            nxt[last[f]] = i
            last[f] = i
            weight[f] += 1
            weight[i] = 0
            alive[i] = False
    for i in range(n):
        first[cur[i]] = -1
    score = np.empty((n, A))
    g_act = np.empty(n, np.int64)
    g_ok = np.empty(n, np.bool_)
    g_live = np.empty(n, np.bool_)
    remap = np.empty(4 * n, np.int64)
    nrx = np.empty(n, np.int64)
    nry = np.empty(n, np.int64)
    disc = 1.0
    for t in range(t0, max_depth):
        for g in range(n_groups):
            g_live[g] = False
            for a in range(A):
                score[g, a] = 0.0
        m = 0
        for i in range(n):
            if alive[i]:
                m += 1
                g = grp[i]
                g_live[g] = True
                w = weight[i]
                for a in range(A):
                    score[g, a] += w * Q[cur[i], a]
        if m == 0:
            break
        for g in range(n_groups):
            if not g_live[g]:
                continue
            g_ok[g] = True
            if lat:
                a_sel, st = _lift_choice(score[g], feas, grx[g], gry[g], window)
                if st == 0:
                    need[0] = grx[g]
                    need[1] = gry[g]
                    need[2] = a_sel
                    return NEED, 0.0
                g_ok[g] = st == 1
                g_act[g] = a_sel
            else:
                g_act[g] = np.argmax(score[g])
        # release followers of leaders about to take a stochastic step
        for i in range(n):
            if alive[i] and weight[i] > 1:
                a = g_act[grp[i]]
                s2 = det_next[a, cur[i]]
                if g_ok[grp[i]] and (s2 < 0 or det_obs[a, s2] < 0):
                    j = nxt[i]
                    while j >= 0:
                        k = nxt[j]
                        nxt[j] = -1
                        last[j] = j
                        weight[j] = 1
                        cur[j] = cur[i]
                        grp[j] = grp[i]
                        alive[j] = True
                        j = k
                    nxt[i] = -1
                    last[i] = i
                    weight[i] = 1
        for k in range(4 * n_groups):
            remap[k] = -1
        new_groups = 0
        for i in range(n):
            if not alive[i]:
                continue
            g = grp[i]
            a = g_act[g]
            w = weight[i]
            if not g_ok[g]:
                acc += w * disc * tail
                alive[i] = False
                continue
            s = cur[i]
            s2 = det_next[a, s]
            if s2 < 0:
                s2 = _next_state(indptr, indices, cum, s, a, psi[ids[i], t, 0])
            if s2 == out:
                if lat:
                    acc += w * disc * tail
                else:
                    acc += w * disc * (reward[s] + gamma * tail)
                alive[i] = False
                continue
            px = grx[g] + steps[a, 0]
            py = gry[g] + steps[a, 1]
            if lat:
                if collide[px + s2 // ny + window, py + s2 % ny + window]:
                    acc += w * disc * tail
                    alive[i] = False
                    continue
            acc += w * disc * reward[s]
            cur[i] = s2
            o = det_obs[a, s2]
            if o < 0:
                o = _observe(omega_cum, a, s2, psi[ids[i], t, 1])
            key = 4 * g + o
            if remap[key] < 0:
                remap[key] = new_groups
                nrx[new_groups] = px
                nry[new_groups] = py
                new_groups += 1
            grp[i] = remap[key]
        n_groups = new_groups
        for g in range(n_groups):
            grx[g] = nrx[g]
            gry[g] = nry[g]
        # merge scenarios that met again in the same state and group
        for i in range(n):
            if not alive[i]:
                continue
            f = first[cur[i]]
            if f >= 0 and grp[f] == grp[i]:
                nxt[last[f]] = i
                last[f] = last[i]
                weight[f] += weight[i]
                weight[i] = 0
                alive[i] = False
            elif f < 0:
                first[cur[i]] = i
        for i in range(n):
            if alive[i]:
                first[cur[i]] = -1
        disc *= gamma
    return DONE, acc / n


@njit(cache=True)
def _weu(frac, u, l, eps, gamma, depth):
    return frac * (u - l - eps * gamma ** (-depth))


@njit(cache=True)
def _expand(b, meta, depth, rx_a, ry_a, u_n, l_n, ldef, expanded, start, count, e_r, e_u, e_l,
            e_child, pool_ids, pool_states, psi, gamma, lat, max_depth, indptr, indices, cum,
            omega_cum, det_next, det_obs, reward, Vext, Q, steps, ny, out, invalid, collide, feas,
            window, K):
    A = steps.shape[0]
    rx = rx_a[b]
    ry = ry_a[b]
    if lat:
        for a in range(A):
            if feas[rx + window, ry + window, a] == 0:
                meta[M_NEED_X] = rx
                meta[M_NEED_Y] = ry
                meta[M_NEED_A] = a
                return NEED
    s0 = start[b]
    n = count[b]
    ids = pool_ids[s0:s0 + n]
    sts = pool_states[s0:s0 + n]
    d = depth[b]
    # phase 1: step and roll out every child without touching the tree
    all_next = np.empty((A, n), np.int64)
    all_obs = np.empty((A, n), np.int64)
    rmean = np.zeros(A)
    cu = np.zeros((A, 4))
    cl = np.zeros((A, 4))
    cd = np.zeros((A, 4))
    cn = np.zeros((A, 4), np.int64)
    need = np.zeros(3, np.int64)
    for a in range(A):
        edge_ok = True
        if lat:
            edge_ok = feas[rx + window, ry + window, a] == 1
        nxt, obs, rew = step_batch(sts, ids, d, psi, a, rx, ry, edge_ok, lat, indptr, indices, cum,
                                   omega_cum, reward, steps, ny, out, invalid, collide, window)
        all_next[a] = nxt
        all_obs[a] = obs
        rmean[a] = rew.mean()
        for o in range(4):
            m = 0
            for i in range(n):
                if obs[i] == o:
                    m += 1
            cn[a, o] = m
            if m == 0:
                continue
            c_ids = np.empty(m, np.int64)
            c_st = np.empty(m, np.int64)
            j = 0
            uu = 0.0
            for i in range(n):
                if obs[i] == o:
                    c_ids[j] = ids[i]
                    c_st[j] = nxt[i]
                    uu += Vext[nxt[i]]
                    j += 1
            uu /= m
            st, lv = rollout(c_st, c_ids, d + 1, max_depth, rx + steps[a, 0], ry + steps[a, 1],
                             psi, gamma, lat, indptr, indices, cum, omega_cum, det_next, det_obs,
                             reward, Q, steps, ny, out, invalid, collide, feas, window, need)
            if st == NEED:
                meta[M_NEED_X] = need[0]
                meta[M_NEED_Y] = need[1]
                meta[M_NEED_A] = need[2]
                return NEED
            cu[a, o] = max(uu, lv)
            cl[a, o] = lv
            cd[a, o] = lv
    # phase 2: commit
    for a in range(A):
        su = 0.0
        sl = 0.0
        for o in range(4):
            m = cn[a, o]
            if m == 0:
                e_child[b, a, o] = -1
                continue
            c = meta[M_NODES]
            meta[M_NODES] += 1
            p = meta[M_POOL]
            j = 0
            for i in range(n):
                if all_obs[a, i] == o:
                    pool_ids[p + j] = ids[i]
                    pool_states[p + j] = all_next[a, i]
                    j += 1
            meta[M_POOL] += m
            start[c] = p
            count[c] = m
            depth[c] = d + 1
            rx_a[c] = rx + steps[a, 0]
            ry_a[c] = ry + steps[a, 1]
            u_n[c] = cu[a, o]
            l_n[c] = cl[a, o]
            ldef[c] = cd[a, o]
            expanded[c] = False
            e_child[b, a, o] = c
            frac = m / n
            su += frac * cu[a, o]
            sl += frac * cl[a, o]
        e_r[b, a] = rmean[a]
        e_u[b, a] = rmean[a] + gamma * su
        e_l[b, a] = rmean[a] + gamma * sl
    expanded[b] = True
    return DONE


@njit(cache=True)
def _backup(path, plen, u_n, l_n, ldef, expanded, count, e_r, e_u, e_l, e_child, gamma):
    A = e_r.shape[1]
    for k in range(plen - 1, -1, -1):
        b = path[k]
        if not expanded[b]:
            continue
        n = count[b]
        best_u = -np.inf
        best_l = -np.inf
        for a in range(A):
            su = 0.0
            sl = 0.0
            for o in range(4):
                c = e_child[b, a, o]
                if c >= 0:
                    frac = count[c] / n
                    su += frac * u_n[c]
                    sl += frac * l_n[c]
            e_u[b, a] = e_r[b, a] + gamma * su
            e_l[b, a] = e_r[b, a] + gamma * sl
            if e_u[b, a] > best_u:
                best_u = e_u[b, a]
            if e_l[b, a] > best_l:
                best_l = e_l[b, a]
        # bounds only tighten; the lower bound never drops below the rollout default
        u_new = min(u_n[b], best_u)
        l_new = max(l_n[b], ldef[b], best_l)
        if u_new < l_new:
            u_new = l_new
        u_n[b] = u_new
        l_n[b] = l_new


@njit(cache=True)
def run_trials(meta, max_trials, eps, depth, rx_a, ry_a, u_n, l_n, ldef, expanded, start, count,
               e_r, e_u, e_l, e_child, pool_ids, pool_states, psi, gamma, lat, max_depth, indptr,
               indices, cum, omega_cum, det_next, det_obs, reward, Vext, Q, steps, ny, out, invalid,
               collide, feas, window, K, trace_u, trace_l):
    """Run search trials until the budget, a closed root gap, or a stall."""
    A = steps.shape[0]
    path = np.empty(max_depth + 2, np.int64)
    while meta[M_TRIALS] < max_trials:
        if meta[M_STALLED]:
            break
        if meta[M_TRIALS] > 0 and u_n[0] - l_n[0] <= eps:
            break
        b = 0
        plen = 0
        grew = False
        while True:
            path[plen] = b
            plen += 1
            if depth[b] >= max_depth:
                break
            if not expanded[b]:
                st = _expand(b, meta, depth, rx_a, ry_a, u_n, l_n, ldef, expanded, start, count,
                             e_r, e_u, e_l, e_child, pool_ids, pool_states, psi, gamma, lat,
                             max_depth, indptr, indices, cum, omega_cum, det_next, det_obs, reward,
                             Vext, Q, steps, ny, out, invalid, collide, feas, window, K)
                if st == NEED:
                    return NEED
                grew = True
                break
            a_star = 0
            for a in range(1, A):
                if e_u[b, a] > e_u[b, a_star]:
                    a_star = a
            best = -1
            best_w = 0.0
            for o in range(4):
                c = e_child[b, a_star, o]
                if c < 0:
                    continue
                w = _weu(count[c] / K, u_n[c], l_n[c], eps, gamma, depth[c])
                if w > best_w:
                    best_w = w
                    best = c
            if best < 0:
                break
            b = best
        _backup(path, plen, u_n, l_n, ldef, expanded, count, e_r, e_u, e_l, e_child, gamma)
        trace_u[meta[M_TRIALS]] = u_n[0]
        trace_l[meta[M_TRIALS]] = l_n[0]
        meta[M_TRIALS] += 1
        if not grew:
            # the tree is unchanged, so every later trial would repeat this one
            meta[M_STALLED] = 1
    return DONE


@njit(cache=True)
def policy_sizes(n_nodes, expanded, ldef, e_l, e_child):
    """Node count of the lower-bound policy tree rooted at each node."""
    A = e_l.shape[1]
    size = np.ones(n_nodes, np.int64)
    for b in range(n_nodes - 1, -1, -1):
        if not expanded[b]:
            continue
        a_best = 0
        for a in range(1, A):
            if e_l[b, a] > e_l[b, a_best]:
                a_best = a
        if ldef[b] >= e_l[b, a_best]:
            continue
        for o in range(4):
            c = e_child[b, a_best, o]
            if c >= 0:
                size[b] += size[c]
    return size
