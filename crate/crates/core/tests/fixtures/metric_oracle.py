"""Brute-force caption metrics used to freeze the metric fixture suite.

Written independently of the Rust scorers: n-grams via Counter, LCS by
memoized recursion, CIDEr-D through explicit sparse tf-idf dictionaries.
Run: python3 metric_oracle.py > metric_cases.jsonl
"""
import json
import math
from collections import Counter
from functools import lru_cache

SIGMA = 6.0
BETA = 1.2


def grams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(cands, refsets):
    match = [0] * 4
    total = [0] * 4
    c_len = 0
    r_len = 0
    for cand, refs in zip(cands, refsets):
        c_len += len(cand)
        # closest reference length, shorter on ties
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            cg = grams(cand, n)
            best = Counter()
            for r in refs:
                for g, c in grams(r, n).items():
                    best[g] = max(best[g], c)
            match[n - 1] += sum(min(c, best[g]) for g, c in cg.items())
            total[n - 1] += max(0, len(cand) - n + 1)
    if c_len == 0:
        return [0.0] * 4
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    out = []
    logs = []
    for n in range(4):
        p = match[n] / total[n] if total[n] else 0.0
        logs.append(math.log(p) if p > 0 else None)
        if any(l is None for l in logs):
            out.append(0.0)
        else:
            out.append(bp * math.exp(sum(logs) / len(logs)))
    return out


def lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l(cand, refs):
    best = 0.0
    for r in refs:
        l = lcs(cand, r)
        if l == 0 or not cand or not r:
            continue
        p, rec = l / len(cand), l / len(r)
        f = (1 + BETA ** 2) * p * rec / (rec + BETA ** 2 * p)
        best = max(best, f)
    return best


def cider_d(cand, refs, corpus):
    n_images = len(corpus)
    df = {}
    for rs in corpus.values():
        seen = set()
        for r in rs:
            for n in range(1, 5):
                seen.update(grams(r, n).keys())
        for g in seen:
            df[g] = df.get(g, 0) + 1

    def vec(toks, n):
        v = {}
        for g, c in grams(toks, n).items():
            d = df.get(g, 0)
            v[g] = c * (math.log(n_images) - math.log(d)) if d > 0 else 0.0
        return v

    total = 0.0
    for r in refs:
        per_n = []
        for n in range(1, 5):
            h, f = vec(cand, n), vec(r, n)
            nh = math.sqrt(sum(x * x for x in h.values()))
            nf = math.sqrt(sum(x * x for x in f.values()))
            dot = sum(min(h[g], f[g]) * f[g] for g in h if g in f)
            val = dot / (nh * nf) if nh > 0 and nf > 0 else 0.0
            val *= math.exp(-((len(cand) - len(r)) ** 2) / (2 * SIGMA ** 2))
            per_n.append(val)
        total += sum(per_n) / 4
    return 10.0 * total / len(refs)


def case(name, corpus, preds):
    corpus_t = {k: [r.split() for r in v] for k, v in corpus.items()}
    ids = list(corpus)
    cands = [preds[i].split() for i in ids]
    refsets = [corpus_t[i] for i in ids]
    b = bleu(cands, refsets)
    per = {}
    for i, c, rs in zip(ids, cands, refsets):
        per[i] = {"rouge_l": rouge_l(c, rs), "cider": cider_d(c, rs, corpus_t)}
    return {
        "name": name,
        "references": corpus,
        "predictions": preds,
        "expected": {
            "bleu": b,
            "rouge_l": sum(p["rouge_l"] for p in per.values()) / len(per),
            "cider": sum(p["cider"] for p in per.values()) / len(per),
            "per_image": per,
        },
    }


CASES = [
    case("identity_single_image", {"a": ["a dog runs on the beach"]}, {"a": "a dog runs on the beach"}),
    case("clipped_unigram", {"a": ["the cat"]}, {"a": "the the the"}),
    case("swapped_pair", {"a": ["b a"]}, {"a": "a b"}),
    case("disjoint", {"a": ["red fox jumps high"], "b": ["blue sky above us"]}, {"a": "green tea", "b": "blue sky above us"}),
    case(
        "identity_three_images",
        {"x": ["my lovely little dog sleeps"], "y": ["what a grim grey day"], "z": ["the old man walks slowly"]},
        {"x": "my lovely little dog sleeps", "y": "what a grim grey day", "z": "the old man walks slowly"},
    ),
    case(
        "toy_three_image_cider",
        {
            "x": ["a dog on the beach", "the dog plays in the sand", "a happy dog on sand"],
            "y": ["a cat on a sofa", "the cat sleeps on the sofa", "a lazy cat"],
            "z": ["a boat on the lake", "boats on a calm lake", "the lake is calm today"],
        },
        {"x": "a dog plays on the beach", "y": "the lazy cat sleeps", "z": "a boat on a lake today"},
    ),
    case(
        "multi_reference_brevity",
        {"p": ["one two three four five six", "one two three"], "q": ["alpha beta gamma delta", "alpha beta"]},
        {"p": "one two", "q": "alpha beta gamma"},
    ),
    case(
        "closest_length_tie_prefers_shorter",
        {"p": ["a b c d", "a b c d e f"], "q": ["x y z w", "x y"]},
        {"p": "a b c d e", "q": "x y z"},
    ),
    case(
        "repetition_penalized",
        {"m": ["the quick brown fox", "a quick fox"], "n": ["lazy dogs sleep all day", "the dog sleeps"]},
        {"m": "quick quick quick quick fox", "n": "the dog the dog sleeps"},
    ),
    case(
        "long_vs_short_length_penalty",
        {"u": ["sun sets over the quiet sea"], "v": ["children play in the park"], "w": ["rain falls on the city"]},
        {"u": "sun sets over the quiet sea and the sky turns red and orange tonight", "v": "children play", "w": "rain falls on the city"},
    ),
    case(
        "partial_overlap_five_refs",
        {
            "i1": ["sweet0 the red dog today", "sweet1 the red dog here", "sweet0 the red dog now", "sweet2 the red dog today", "sweet3 the red dog again"],
            "i2": ["grim0 the blue cat here", "grim1 the blue cat now", "grim2 the blue cat again", "grim0 the blue cat today", "grim3 the blue cat indeed"],
        },
        {"i1": "sweet0 the red dog", "i2": "grim1 the red cat now"},
    ),
    case(
        "empty_candidate",
        {"a": ["nothing to see here"], "b": ["something to see there"]},
        {"a": "", "b": "something to see there"},
    ),
]

if __name__ == "__main__":
    for c in CASES:
        print(json.dumps(c, sort_keys=True))
