"""Independent brute-force reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def ndcg(rels, k):
    def dcg(order):
        total = 0.0
        for pos in range(min(k, len(order))):
            total += (math.pow(2.0, order[pos]) - 1.0) / math.log(pos + 2, 2)
        return total

    if len(rels) <= 6:
        best = max(dcg(list(p)) for p in itertools.permutations(rels)) if rels else 0.0
    else:
        best = dcg(sorted(rels, reverse=True))
    return 0.0 if best == 0.0 else dcg(list(rels)) / best


def ranknet(scores, labels):
    total, count = 0.0, 0
    for i in range(len(scores)):
        for j in range(len(scores)):
            if labels[i] > labels[j]:
                total += math.log(1.0 + math.exp(-(scores[i] - scores[j])))
                count += 1
    return total / count if count else 0.0


def token_select(query_ids, doc_ids, emb, k):
    """Positions picked by explicit per-row argsort; duplicates keep the leftmost."""
    chosen = set()
    for q in query_ids:
        sims = [float(np.dot(emb[q], emb[d])) for d in doc_ids]
        order = np.lexsort((np.arange(len(sims)), -np.array(sims)))
        chosen.update(int(j) for j in order[:k])
    keep = {}
    for j in sorted(chosen):
        if doc_ids[j] not in keep:
            keep[doc_ids[j]] = j
    return sorted(keep.values())


def bm25(query_terms, docs_terms, doc_index, k1=1.2, b=0.75):
    n = len(docs_terms)
    avgdl = sum(len(d) for d in docs_terms) / n
    doc = docs_terms[doc_index]
    score = 0.0
    for term in query_terms:
        df = sum(1 for d in docs_terms if term in d)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        tf = doc.count(term)
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(doc) / avgdl))
    return score


def attention(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, mask=None):
    """Loop-based multi-head self-attention over rows of x (m x d)."""
    m, d = x.shape
    hd = d // n_heads
    q, k, v = x @ wq.T + bq, x @ wk.T + bk, x @ wv.T + bv
    out = np.zeros((m, d))
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(m):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(m)])
            if mask is not None:
                logits = np.where(mask, logits, -np.inf)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(m))
    return out @ wo.T + bo
