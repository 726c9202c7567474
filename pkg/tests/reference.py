"""Independent oracles used by the test suite.

None of these import the package's forward pass, recall code or schedulers;
they only read model weights.
"""

from __future__ import annotations

import math
from fractions import Fraction


def full_recompute_logits(model, tokens):
    """Last-position logits, recomputing the whole causal sequence with no cache."""
    import numpy as np

    cfg = model.config
    X = model.embedding[np.asarray(tokens)]
    T = len(tokens)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    for lw in model.layers:
        Q, K, V = X @ lw.wq.T, X @ lw.wk.T, X @ lw.wv.T
        A = (Q @ K.T) / math.sqrt(cfg.hidden_dim)
        A[mask] = -np.inf
        A = np.exp(A - A.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        H = X + (A @ V) @ lw.wo.T
        out = H.copy()
        S = H @ lw.gate.T
        for t in range(T):
            order = sorted(range(cfg.num_experts), key=lambda e: (-S[t, e], e))
            chosen = sorted(order[: cfg.top_k])
            s = np.array([S[t, e] for e in chosen])
            w = np.exp(s - s.max())
            w /= w.sum()
            for wi, e in zip(w, chosen):
                out[t] += wi * (lw.w2[e] @ np.maximum(lw.w1[e] @ H[t], 0.0))
        X = out
    return X[-1] @ model.head


def reference_decode(model, prompt, max_tokens, eos_token=0):
    """Greedy tokens after the prompt's own continuation, one full recompute per step."""
    import numpy as np

    seq = list(prompt)
    seq.append(int(np.argmax(full_recompute_logits(model, seq))))
    out = []
    for _ in range(max_tokens):
        tok = int(np.argmax(full_recompute_logits(model, seq)))
        out.append(tok)
        seq.append(tok)
        if eos_token is not None and tok == eos_token:
            break
    return out


def _matvec(M, x):
    return [sum(M[i][j] * x[j] for j in range(len(x))) for i in range(len(M))]


def scalar_next_token(model, tokens):
    """Pure-Python (lists and math only) forward over ``tokens``.

    Returns the argmax next token and the last token's per-layer routing.
    """
    cfg = model.config
    layers = [
        {name: getattr(lw, name).tolist() for name in ("wq", "wk", "wv", "wo", "gate", "w1", "w2")}
        for lw in model.layers
    ]
    emb = model.embedding.tolist()
    head = model.head.tolist()
    xs = [list(emb[t]) for t in tokens]
    last_routes = []
    for lw in layers:
        keys = [_matvec(lw["wk"], x) for x in xs]
        vals = [_matvec(lw["wv"], x) for x in xs]
        new = []
        for t, x in enumerate(xs):
            q = _matvec(lw["wq"], x)
            scores = [sum(a * b for a, b in zip(keys[s], q)) / math.sqrt(cfg.hidden_dim) for s in range(t + 1)]
            m = max(scores)
            ws = [math.exp(s - m) for s in scores]
            z = sum(ws)
            ctx = [sum(ws[s] / z * vals[s][j] for s in range(t + 1)) for j in range(cfg.hidden_dim)]
            h = [xi + oi for xi, oi in zip(x, _matvec(lw["wo"], ctx))]
            g = _matvec(lw["gate"], h)
            order = sorted(range(cfg.num_experts), key=lambda e: (-g[e], e))[: cfg.top_k]
            if t == len(xs) - 1:
                last_routes.append(tuple(order))
            chosen = sorted(order)
            gm = max(g[e] for e in chosen)
            mix = [math.exp(g[e] - gm) for e in chosen]
            mz = sum(mix)
            y = list(h)
            for wi, e in zip(mix, chosen):
                hidden = [max(v, 0.0) for v in _matvec(lw["w1"][e], h)]
                out = _matvec(lw["w2"][e], hidden)
                y = [a + wi / mz * b for a, b in zip(y, out)]
            new.append(y)
        xs = new
    last = xs[-1]
    logits = [sum(last[i] * head[i][v] for i in range(cfg.hidden_dim)) for v in range(cfg.vocab_size)]
    best = max(range(cfg.vocab_size), key=lambda v: (logits[v], -v))
    return best, tuple(last_routes)


def brute_force_recall(records, k, L):
    """Per-token and overall recall by explicit loops over (q, n, l).

    ``records`` are (q, n, l, true_set, pred_set, available) tuples.  A
    prompt is present at token n if it has any record for n.
    """
    table = {}
    for q, n, l, true, pred, avail in records:
        table[(q, n, l)] = (set(true), set(pred), avail)
    qs = sorted({key[0] for key in table})
    ns = sorted({key[1] for key in table})
    per_token = {}
    num_all = 0
    den_all = 0
    for n in ns:
        num = 0
        present = 0
        for q in qs:
            if not any((q, n, l) in table for l in range(L)):
                continue
            present += 1
            for l in range(L):
                true, pred, avail = table[(q, n, l)]
                c = 0
                if avail:
                    for e in pred:
                        if e in true:
                            c += 1
                num += c
        per_token[n] = Fraction(num, k * L * present)
        num_all += num
        den_all += k * L * present
    return per_token, Fraction(num_all, den_all)


def pipeline_completion(arrivals, computes):
    """done_i = max(arrive_i, done_{i-1}) + compute_i; returns the last done."""
    done = 0.0
    for arrive, compute in zip(arrivals, computes):
        done = max(arrive, done) + compute
    return done


def random_record_tuples(rng, max_q=5, max_n=20, max_l=8, max_k=3, num_experts=8):
    """Random complete record sets with early termination per prompt.

    Returns (tuples, k, L) with tuples as accepted by ``brute_force_recall``.
    """
    Q = rng.randint(1, max_q)
    N = rng.randint(1, max_n)
    L = rng.randint(1, max_l)
    k = rng.randint(1, max_k)
    out = []
    for q in range(Q):
        last = rng.randint(1, N)
        for n in range(1, last + 1):
            for l in range(L):
                true = frozenset(rng.sample(range(num_experts), k))
                avail = rng.random() < 0.85
                pred = frozenset(rng.sample(range(num_experts), k)) if avail else frozenset()
                out.append((q, n, l, true, pred, avail))
    rng.shuffle(out)
    return out, k, L


def perfect_prediction_stalls(t_main, t_worker, t_shadow, t_load, num_groups, num_layers, iterations):
    """Per-layer stalls (ticks) of the decode pipeline when every prediction is right.

    Plain recurrence over global layer index g = (n-1)*L + l:
      shadow: pred[g] = max(pred[g-1], mstart[g-L]) + t_shadow   (no alignment)
      loader: start[g] = max(ec[g-NG], min(pred[g], gate[g])), lend[g] = start + t_load
      main:   mstart[g] = ec[g-1], gate = mstart + t_main,
              ready = max(gate, lend[g]), ec[g] = ready + t_worker
    Inputs are integer ticks.  Returns (stalls, token_times).
    """
    total = num_layers * iterations
    pred = [0] * total
    mstart = [0] * total
    ec = [0] * total
    stalls = []
    tokens = []
    prev_ec = 0
    for g in range(total):
        mstart[g] = prev_ec
        gate = mstart[g] + t_main
        p_prev = pred[g - 1] if g else 0
        wait_main = mstart[g - num_layers] if g >= num_layers else 0
        pred[g] = max(p_prev, wait_main) + t_shadow
        # the shadow is causally ahead only if it finished before it was needed
        ec_prev = ec[g - num_groups] if g >= num_groups else 0
        start = max(ec_prev, min(pred[g], gate))
        ready = max(gate, start + t_load)
        stalls.append(ready - gate)
        ec[g] = ready + t_worker
        prev_ec = ec[g]
        if g % num_layers == num_layers - 1:
            tokens.append(ec[g])
    return stalls, tokens
