"""Independent reference implementations used to validate the package.

Everything here is written as plain scalar loops, deliberately avoiding the
vectorized routines (searchsorted, einsum, masked softmax) that the package
itself uses, so agreement between the two routes is meaningful.
"""

import math

import numpy as np


def scan_events(values, observed, divider):
    """Scalar scan for divider crossings; returns (up_list, down_list)."""
    up, down = [], []
    for t in range(1, len(values)):
        if not (observed[t - 1] and observed[t]):
            continue
        if values[t - 1] < divider and values[t] >= divider:
            up.append(t)
        if values[t - 1] > divider and values[t] <= divider:
            down.append(t)
    return up, down


def event_adjacency_brute(events, t_p, t_q):
    """O(N^2 * events^2) group-membership count, no sorting tricks.

    ``events`` is a list of per-vertex event-time lists. For each event t of
    vertex i, vertex j joins the group when some event of j lies inside
    [t - t_p, t + t_q]; the score is the fraction of i's events whose group
    contains j, clamped to [0, 1], with the diagonal forced to 1.
    """
    n = len(events)
    a = np.zeros((n, n))
    for i in range(n):
        ev_i = list(events[i])
        if not ev_i:
            continue
        for j in range(n):
            hits = 0
            for t in ev_i:
                in_group = False
                for s in events[j]:
                    if t - t_p <= s <= t + t_q:
                        in_group = True
                        break
                if in_group:
                    hits += 1
            a[i, j] = hits / len(ev_i)
    for i in range(n):
        for j in range(n):
            a[i, j] = min(1.0, max(0.0, a[i, j]))
        a[i, i] = 1.0
    return a


def gelu_scalar(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def _affine_scalar(w, b, vec):
    return [sum(w[r][c] * vec[c] for c in range(len(vec))) + b[r] for r in range(len(b))]


def gat_attention_scalar(x, enc, adj, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o):
    """Single graph-attention layer, one scalar-arithmetic step at a time.

    Queries and keys see the input concatenated with each vertex's encoding;
    values see the raw input. Scores pass through the exact GELU, then the
    exp-times-weight normalization over each row of ``adj`` (entries in
    [0, 1]). Returns (output, coefficients).
    """
    n = x.shape[0]
    h = w_q.shape[0]
    xe = [list(x[i]) + list(enc[i]) for i in range(n)]

    q = [_affine_scalar(w_q, b_q, xe[i]) for i in range(n)]
    k = [_affine_scalar(w_k, b_k, xe[i]) for i in range(n)]
    v = [_affine_scalar(w_v, b_v, list(x[i])) for i in range(n)]

    mixed = np.zeros((n, h))
    coef = np.zeros((n, n))
    for i in range(n):
        scores = []
        for j in range(n):
            dot = sum(q[i][c] * k[j][c] for c in range(h))
            scores.append(gelu_scalar(dot))
        denom = 0.0
        for j in range(n):
            denom += math.exp(scores[j]) * adj[i][j]
        for j in range(n):
            coef[i, j] = math.exp(scores[j]) * adj[i][j] / denom
            for c in range(h):
                mixed[i, c] += coef[i, j] * v[j][c]
    final = np.zeros((n, w_o.shape[0]))
    for i in range(n):
        final[i] = _affine_scalar(w_o, b_o, list(mixed[i]))
    return final, coef


def glgat_forward_scalar(x, enc, adj_stack, pe, p, dims):
    """Full scalar-loop evaluation of the multi-adjacency attention layer.

    ``p`` maps parameter names (w_q_global, b_q_global, w_q_local,
    b_q_local, w_q_compress, b_q_compress, w_k, b_k, w_v, b_v, w_ff, b_ff)
    to plain arrays; ``dims`` is (h, h_adj, h_head, h_pe). Channel packing
    is done with explicit index arithmetic: attention channel (n, m, c)
    lives at (n*h_head + m)*h + c and encoding-query block n occupies
    h_prime + n*h_pe onward. Returns (output, scores, coefficients) with
    scores and coefficients indexed [i, n, m, j].
    """
    h, h_adj, h_head, h_pe = dims
    h_prime = h * h_adj * h_head
    n = x.shape[0]
    xe = [list(x[i]) + (list(enc[i]) if enc is not None else []) for i in range(n)]

    q = []
    for i in range(n):
        qg = _affine_scalar(p["w_q_global"], p["b_q_global"], xe[i])
        ql = _affine_scalar(p["w_q_local"][i], p["b_q_local"][i], xe[i])
        q.append(_affine_scalar(p["w_q_compress"], p["b_q_compress"], qg + ql))
    k = [_affine_scalar(p["w_k"], p["b_k"], xe[i]) for i in range(n)]
    v = [_affine_scalar(p["w_v"], p["b_v"], list(x[i])) for i in range(n)]

    def at(nn, m, c):
        return (nn * h_head + m) * h + c

    scores = np.zeros((n, h_adj, h_head, n))
    coef = np.zeros((n, h_adj, h_head, n))
    hidden = np.zeros((n, h_prime))
    for i in range(n):
        for a in range(h_adj):
            for m in range(h_head):
                for j in range(n):
                    dot = sum(q[i][at(a, m, c)] * k[j][at(a, m, c)] for c in range(h))
                    for c in range(h_pe):
                        dot += q[i][h_prime + a * h_pe + c] * pe[i][j][c]
                    scores[i, a, m, j] = gelu_scalar(dot)
                denom = sum(
                    math.exp(scores[i, a, m, j]) * adj_stack[a][i][j] for j in range(n)
                )
                for j in range(n):
                    coef[i, a, m, j] = (
                        math.exp(scores[i, a, m, j]) * adj_stack[a][i][j] / denom
                    )
                for c in range(h):
                    hidden[i, at(a, m, c)] = sum(
                        coef[i, a, m, j] * v[j][at(a, m, c)] for j in range(n)
                    )
    out = np.zeros((n, len(p["b_ff"])))
    for i in range(n):
        out[i] = _affine_scalar(p["w_ff"], p["b_ff"], list(hidden[i]))
    return out, scores, coef


def metrics_scalar(y_true, y_pred, mask, mape_floor=1.0):
    """MAE / RMSE / MAPE over mask-true entries, one element at a time."""
    abs_sum = 0.0
    sq_sum = 0.0
    count = 0
    ape_sum = 0.0
    ape_count = 0
    flat_t = np.asarray(y_true).ravel()
    flat_p = np.asarray(y_pred).ravel()
    flat_m = np.asarray(mask).ravel()
    for t, p, m in zip(flat_t, flat_p, flat_m):
        if not m:
            continue
        diff = p - t
        abs_sum += abs(diff)
        sq_sum += diff * diff
        count += 1
        if abs(t) >= mape_floor:
            ape_sum += abs(diff) / abs(t)
            ape_count += 1
    mae = abs_sum / count if count else math.nan
    rmse = math.sqrt(sq_sum / count) if count else math.nan
    mape = 100.0 * ape_sum / ape_count if ape_count else math.nan
    return mae, rmse, mape


def historical_average_scalar(train_data, train_mask, tod_slots, n_slots):
    """Per (vertex, time-of-day slot) mean of observed training readings.

    Empty slots fall back to the vertex's overall observed training mean.
    Returns an (n_slots, N) table.
    """
    t, n = train_data.shape
    table = np.zeros((n_slots, n))
    for v in range(n):
        total, cnt = 0.0, 0
        for s in range(t):
            if train_mask[s, v]:
                total += train_data[s, v]
                cnt += 1
        fallback = total / cnt if cnt else 0.0
        for slot in range(n_slots):
            acc, k = 0.0, 0
            for s in range(t):
                if train_mask[s, v] and tod_slots[s] == slot:
                    acc += train_data[s, v]
                    k += 1
            table[slot, v] = acc / k if k else fallback
    return table


def smooth_l1_scalar(diff):
    d = abs(diff)
    return 0.5 * d * d if d < 1.0 else d - 0.5
