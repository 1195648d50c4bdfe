#!/usr/bin/env python3
"""Standalone re-implementation of a mock-provider gear run.

Reads a run config (mode gear, mock generator, mock embedder, random split)
and writes the report.jsonl the pipeline is expected to produce. Shares no
code with the C++ library: RNG, hashing, prompt rendering, pooling, scoring
and metrics are all rewritten here from their definitions.

usage: simulate_fixture.py CONFIG PROMPTS_DIR [OUT]
"""

import hashlib
import json
import math
import struct
import sys
from pathlib import Path

M64 = (1 << 64) - 1


def fnv1a64(s):
    h = 0xCBF29CE484222325
    for b in s.encode():
        h ^= b
        h = (h * 0x100000001B3) & M64
    return h


def mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def mix_seed(seed, label):
    return mix(seed ^ fnv1a64(label))


class SplitMix:
    def __init__(self, seed):
        self.state = seed & M64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & M64
        return mix(self.state)

    def bounded(self, bound):
        threshold = ((1 << 64) - bound) % bound
        while True:
            r = self.next()
            if r >= threshold:
                return r % bound

    def uniform(self):
        return (self.next() >> 11) * 2.0 ** -53


def shuffle(items, seed):
    rng = SplitMix(seed)
    items = list(items)
    for i in range(len(items), 1, -1):
        j = rng.bounded(i)
        items[i - 1], items[j] = items[j], items[i - 1]
    return items


def collapse(s):
    return " ".join(s.split())


def fold(s):
    return "".join(chr(ord(c) + 32) if "A" <= c <= "Z" else c for c in s)


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# --- corpus ----------------------------------------------------------------

def load_corpus(manifest_path):
    manifest = json.loads(manifest_path.read_text())
    path = manifest_path.parent / manifest["path"]
    entries, by_def = [], {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        d = collapse(rec["definition"])
        srcs = rec.get("sources") or [manifest["name"]] * len(rec["terms"])
        if len(srcs) == 1 and len(rec["terms"]) > 1:
            srcs = srcs * len(rec["terms"])
        if d not in by_def:
            by_def[d] = len(entries)
            entries.append({"definition": d, "terms": [], "sources": []})
        e = entries[by_def[d]]
        for t, s in zip(rec["terms"], srcs):
            t = collapse(t)
            labels = s if isinstance(s, list) else [s]
            folded = [fold(x) for x in e["terms"]]
            if fold(t) in folded:
                i = folded.index(fold(t))
            else:
                e["terms"].append(t)
                e["sources"].append([])
                i = len(e["terms"]) - 1
            for lab in labels:
                if lab not in e["sources"][i]:
                    e["sources"][i].append(lab)
    return manifest, entries


def record_of(e):
    return {"definition": e["definition"], "terms": e["terms"],
            "sources": [s[0] if len(s) == 1 else s for s in e["sources"]]}


def labels_of(e):
    out = []
    for s in e["sources"]:
        for lab in s:
            if lab not in out:
                out.append(lab)
    return out


# --- generation ------------------------------------------------------------

SYLLABLES = ["ka", "lo", "mi", "ru", "ve", "zan", "tor", "bel",
             "quo", "dri", "sen", "pla", "gri", "fon", "ush", "yel"]


def mock_terms(table, seed, definition, k):
    reserved = {fold(t) for terms in table.values() for t in terms}
    out, used = [], set()
    for t in table.get(definition, []):
        if len(out) == k:
            break
        if fold(t) not in used:
            used.add(fold(t))
            out.append(fold(t))
    rng = SplitMix(mix_seed(seed, definition))
    while len(out) < k:
        n = 2 + rng.bounded(2)
        w = "".join(SYLLABLES[rng.bounded(16)] for _ in range(n))
        if w in reserved or w in used:
            continue
        used.add(w)
        out.append(w)
    return out


def render(template, slots):
    out, i = [], 0
    while i < len(template):
        if template[i] == "{":
            for name, value in slots.items():
                if template.startswith("{" + name + "}", i):
                    out.append(value)
                    i += len(name) + 2
                    break
            else:
                out.append(template[i])
                i += 1
        else:
            out.append(template[i])
            i += 1
    return "".join(out)


# --- vectors ---------------------------------------------------------------

def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def mock_embed(seed, text, dim):
    rng = SplitMix(mix_seed(seed, text))
    v = [2.0 * rng.uniform() - 1.0 for _ in range(dim)]
    sq = 0.0
    for x in v:
        sq += x * x
    norm = math.sqrt(sq)
    return [f32(x / norm) for x in v]


def lane_dot(a, b):
    acc = [0.0] * 8
    n = len(a) - len(a) % 8
    for i in range(0, n, 8):
        for j in range(8):
            acc[j] += a[i + j] * b[i + j]
    tail = 0.0
    for i in range(n, len(a)):
        tail += a[i] * b[i]
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail


def cos(a, b, sqa, sqb):
    return max(-1.0, min(1.0, lane_dot(a, b) / math.sqrt(sqa * sqb)))


def f32le(vectors):
    return b"".join(struct.pack("<%df" % len(v), *v) for v in vectors)


# --- metrics ---------------------------------------------------------------

def metrics(results, p_at, acc_at):
    n = len(results)
    mrr = 0.0
    for r in results:
        mrr += 1.0 / (r["rank"] + 1)
    block = {"queries": n, "scored": n, "missing_gold": 0, "degraded": 0, "mrr": mrr / n}
    block["p_at"] = {}
    for k in p_at:
        s = 0.0
        for r in results:
            s += sum(r["rel"][:k]) / k
        block["p_at"][str(k)] = s / n
    block["acc_at"] = {str(k): sum(1 for r in results if r["rank"] < k) / n for k in acc_at}
    ranks = sorted(float(r["rank"]) for r in results)
    block["median_rank"] = ranks[n // 2] if n % 2 else (ranks[n // 2 - 1] + ranks[n // 2]) / 2.0
    mean = 0.0
    for r in results:
        mean += float(r["rank"])
    mean /= n
    ss = 0.0
    for r in results:
        ss += (r["rank"] - mean) * (r["rank"] - mean)
    block["rank_std"] = math.sqrt(ss / n)
    return block


def simulate(config_path, prompts_dir):
    cfg = json.loads(config_path.read_text())
    base = config_path.parent
    assert cfg["mode"] == "gear" and cfg["split"]["eval_set"] == "all"
    manifest, entries = load_corpus(base / cfg["corpus"])
    gen, emb, ev = cfg["generation"], cfg["embedding"], cfg["eval"]
    table = json.loads((base / gen["mock_table"]).read_text())
    template = (prompts_dir / (cfg["prompt"]["variant"] + ".txt")).read_text()
    dim, eseed = emb["dimension"], emb["mock_seed"]
    m = cfg["m"]

    vocab = sorted({t for e in entries for t in e["terms"]}, key=lambda s: s.encode())
    rows = [mock_embed(eseed, t, dim) for t in vocab]
    row_sq = [lane_dot(r, r) for r in rows]

    ids = list(range(len(entries)))
    order = shuffle(ids, cfg["prompt"]["fewshot_seed"])
    results, gen_digest, query_vectors = [], hashlib.sha256(), []
    for qid, e in enumerate(entries):
        shots = [entries[i] for i in order if entries[i]["definition"] != e["definition"]][: cfg["prompt"]["fewshot_n"]]
        examples = "\n".join('definition: "%s" -> term: "%s"' % (s["definition"], s["terms"][0]) for s in shots)
        prompt = render(template, {"definition": e["definition"], "k": str(m), "dictionary": manifest["name"],
                                   "description": manifest["description"], "examples": examples})
        key = hashlib.sha256((gen["model_id"] + "\x1f" + prompt).encode()).hexdigest()
        raw = dumps({"terms": mock_terms(table, gen["mock_noise_seed"], e["definition"], m)})
        gen_digest.update((key + "\n" + raw + "\n").encode())
        cands = []
        for t in json.loads(raw)["terms"]:
            c = fold(collapse(t))
            if c and c not in cands:
                cands.append(c)
        cands = cands[:m]

        vecs = [mock_embed(eseed, c, dim) for c in cands]
        q = [f32(sum(v[i] for v in vecs) / len(vecs)) for i in range(dim)]
        query_vectors.append(q)
        qsq = lane_dot(q, q)
        scores = [cos(q, rows[i], qsq, row_sq[i]) for i in range(len(vocab))]
        ranking = sorted(range(len(vocab)), key=lambda i: (-scores[i], i))
        gold = {fold(t) for t in e["terms"]}
        rank = next(pos for pos, i in enumerate(ranking) if fold(vocab[i]) in gold)
        depth = max(ev["topk"], max(ev["p_at"]))
        rel = [fold(vocab[i]) in gold for i in ranking[:depth]]
        results.append({"rank": rank, "rel": rel, "labels": labels_of(e)})

    corpus_digest = hashlib.sha256("".join(dumps(record_of(e)) + "\n" for e in entries).encode()).hexdigest()
    provenance = {
        "corpus_sha256": corpus_digest,
        "entries": len(entries),
        "queries": len(results),
        "vocabulary_size": len(vocab),
        "index_sha256": hashlib.sha256(f32le(rows)).hexdigest(),
        "query_vectors_sha256": hashlib.sha256(f32le(query_vectors)).hexdigest(),
        "generations_sha256": gen_digest.hexdigest(),
    }
    resolved = {k: v for k, v in cfg.items() if k not in ("cache_dir", "out_dir")}
    lines = [dumps({"record": "config", "config": resolved, "provenance": provenance})]
    agg = metrics(results, ev["p_at"], ev["acc_at"])
    agg.update(record="metrics", scope="all")
    lines.append(dumps(agg))
    if ev["per_source"]:
        labels = sorted({lab for r in results for lab in r["labels"]}, key=lambda s: s.encode())
        for lab in labels:
            block = metrics([r for r in results if lab in r["labels"]], ev["p_at"], ev["acc_at"])
            block.update(record="metrics", scope="source", source=lab)
            lines.append(dumps(block))
    return "".join(line + "\n" for line in lines)


def main():
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    report = simulate(Path(sys.argv[1]), Path(sys.argv[2]))
    if len(sys.argv) > 3:
        Path(sys.argv[3]).write_text(report)
    else:
        sys.stdout.write(report)


if __name__ == "__main__":
    main()
