"""Loop-by-loop re-implementation of the objective, used as an oracle."""
import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def unit(v):
    n = math.sqrt(dot(v, v))
    return [x / n for x in v]


def argmax(values):
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def topk(values, k):
    chosen = []
    for _ in range(min(k, len(values))):
        best = None
        for i, v in enumerate(values):
            if i in chosen:
                continue
            if best is None or v > values[best]:
                best = i
        chosen.append(best)
    return chosen


def mlp_row(x, W1, W2, eps=1e-12):
    d, h = len(W1), len(W1[0])
    hidden = [max(0.0, sum(x[a] * W1[a][b] for a in range(d))) for b in range(h)]
    out = [sum(hidden[b] * W2[b][c] for b in range(h)) for c in range(d)]
    if math.sqrt(dot(out, out)) < eps:
        return unit(x)
    return unit(out)


def reference_objective(bundle, params, cfg):
    """Selections and loss components from plain nested loops."""
    text = bundle.text.tolist()
    C = len(text)
    S, n_views, M = bundle.n_support, bundle.A + 1, bundle.M
    W1, W2, Wa = params.W1.tolist(), params.W2.tolist(), params.Wa.tolist()

    corpus, where = [], []
    for s in range(S):
        for v in range(n_views):
            for m in range(M):
                corpus.append(mlp_row(bundle.support_views[s, v, m].tolist(), W1, W2))
                where.append((s, v, m))
    H = len(corpus)

    D = [[dot(text[j], corpus[i]) for i in range(H)] for j in range(C)]
    tit = [argmax(D[j]) for j in range(C)]

    soft_total, hard_total, hits = 0.0, 0.0, 0
    for j in range(C):
        E = [dot(corpus[tit[j]], text[c]) for c in range(C)]
        r = argmax(E)
        hits += r == j
        hard_total += dot(text[j], text[r])
        top = max(E)
        weights = [math.exp((e - top) / cfg.tau_soft) for e in E]
        z = sum(weights)
        rec = [sum(weights[c] / z * text[c][a] for c in range(C)) for a in range(len(text[0]))]
        soft_total += dot(text[j], unit(rec))
    cyc_txt_hard = 1.0 - hard_total / C
    cyc_txt_soft = 1.0 - soft_total / C

    anchors = set()
    for b in range(S * n_views):
        for j in range(C):
            block = [D[j][b * M + m] for m in range(M)]
            for local in topk(block, cfg.k):
                anchors.add(b * M + local)
    anchors = sorted(anchors)

    retrieved = []
    img_total = 0.0
    for n in anchors:
        mid = argmax([dot(corpus[n], text[c]) for c in range(C)])
        s_n, _, _ = where[n]
        best = None
        for i in range(H):
            s_i, v_i, _ = where[i]
            if cfg.retrieval == "cross_view" and s_i != s_n:
                continue
            if cfg.retrieval == "intra_image" and (s_i != s_n or v_i != 0):
                continue
            if best is None or dot(text[mid], corpus[i]) > dot(text[mid], corpus[best]):
                best = i
        retrieved.append(best)
        img_total += dot(corpus[n], corpus[best])
    cyc_img = 1.0 - img_total / len(anchors)

    ce_total = 0.0
    d = len(text[0])
    for s in range(S):
        g = bundle.support_globals[s].tolist()
        q = [g[c] + sum(g[a] * Wa[a][c] for a in range(d)) for c in range(d)]
        q = unit(q)
        logits = [dot(q, text[c]) / cfg.tau_ce for c in range(C)]
        top = max(logits)
        log_z = top + math.log(sum(math.exp(x - top) for x in logits))
        ce_total += log_z - logits[int(bundle.support_labels[s])]
    ce = ce_total / S

    return {
        "tit": tit,
        "anchors": anchors,
        "retrieved": retrieved,
        "hard_rate": hits / C,
        "cyc_txt_soft": cyc_txt_soft,
        "cyc_txt_hard": cyc_txt_hard,
        "cyc_img": cyc_img,
        "ce": ce,
    }
