#!/usr/bin/env python3
"""Regenerate the test fixtures under tests/fixtures/.

The corpus audit golden file is computed here with a one-pass counter over
the raw JSON-lines text, independently of the C++ tokenizer.
"""
import json
import random
import re
import sys
from pathlib import Path

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests" / "fixtures")
OUT.mkdir(parents=True, exist_ok=True)
rng = random.Random(20240611)

BASE = 0x4E00
POOL = [chr(BASE + 37 * i) for i in range(420)]

# --- allograph pairs: random trees (some long chains) plus redundant links --
family_tokens = POOL[:260]
rng.shuffle(family_tokens)
families = []
cursor = 0
sizes = [5, 6, 7, 5] + [rng.choice([2, 2, 3, 3, 4, 5]) for _ in range(200)]
for size in sizes:
    if cursor + size > len(family_tokens):
        break
    families.append(family_tokens[cursor:cursor + size])
    cursor += size

eras = ["Shang", "WesternZhou", "EasternZhou", "-"]
pairs = []
for fi, fam in enumerate(families):
    if fi < 4:
        # explicit chains a-b-c-d(-e...)
        for a, b in zip(fam, fam[1:]):
            pairs.append((a, b))
    else:
        for i in range(1, len(fam)):
            pairs.append((fam[rng.randrange(i)], fam[i]))
    if len(fam) >= 3 and rng.random() < 0.3:
        a, b = rng.sample(fam, 2)
        pairs.append((a, b))
rng.shuffle(pairs)

with open(OUT / "pairs.tsv", "w", encoding="utf-8") as f:
    f.write("# grapheme-allograph pairs (synthetic fixture)\n")
    f.write("# tokenA\ttokenB\tera\tsource\n")
    for i, (a, b) in enumerate(pairs):
        f.write(f"{a}\t{b}\t{rng.choice(eras)}\tfixture-{i:04d}\n")
    # loan-character links are listed but never merged
    f.write(f"{POOL[300]}\t{POOL[301]}\tloan\tfixture-loan-1\n")
    f.write(f"{POOL[302]}\t{POOL[303]}\ttongjia\tfixture-loan-2\n")

# --- corpus -----------------------------------------------------------------
dynasties = ["Shang", "WesternZhou", "SpringAutumn", "WarringStates"]
periods = ["Early", "Middle", "Late"]
records = []
texts = []


def random_text():
    n = rng.choice([1, 1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 24])
    cells = []
    for _ in range(n):
        r = rng.random()
        if r < 0.03:
            cells.append("□")
        elif r < 0.045:
            cells.append("{UNK:%d}" % rng.randrange(6))
        elif r < 0.05:
            cells.append("{G:" + rng.choice(POOL) + rng.choice(POOL) + "}")
        elif r < 0.055:
            cells.append(rng.choice(POOL) + "\ufe00")
        else:
            cells.append(rng.choice(POOL))
    return "".join(cells)


for i in range(320):
    if texts and rng.random() < 0.12:
        text = rng.choice(texts)
    else:
        text = random_text()
    texts.append(text)
    rec = {"id": f"FX.{i:05d}", "text": text}
    if rng.random() < 0.85:
        rec["dynasty"] = rng.choice(dynasties)
        if rng.random() < 0.8:
            rec["period"] = rng.choice(periods)
    if rng.random() < 0.3:
        rec["provenance"] = f"fixture catalogue {i}"
    records.append(rec)

# ten identical copies of one formula
formula = "伯先父鬲"
for k in range(10):
    records.append({"id": f"FX.DUP.{k:02d}", "text": formula, "dynasty": "WesternZhou"})

with open(OUT / "corpus.jsonl", "w", encoding="utf-8") as f:
    for rec in records:
        f.write(json.dumps(rec, ensure_ascii=False) + "\n")

# --- independent audit --------------------------------------------------------
ATTACH = re.compile("[\\u0300-\\u036f\\u1ab0-\\u1aff\\u20d0-\\u20ff\\ufe20-\\ufe2f\\ufe00-\\ufe0f\\u200d]")
CELL = re.compile(r"\{UNK:\d+\}|\{G:[^}]+\}|□|.", re.S)


def count(text):
    ident = unread = undec = 0
    cells = []
    for m in CELL.finditer(text):
        s = m.group(0)
        if s.isspace():
            continue
        if ATTACH.fullmatch(s):
            cells[-1] = cells[-1] + s
            continue
        if s == "□":
            unread += 1
        elif s.startswith("{UNK:"):
            undec += 1
        else:
            ident += 1
        cells.append(s)
    return ident, unread, undec, cells


def summarize(recs):
    tot = [0, 0, 0]
    for rec in recs:
        a, b, c, _ = count(rec["text"])
        tot[0] += a
        tot[1] += b
        tot[2] += c
    return {
        "inscriptions": len(recs),
        "tokens": sum(tot),
        "identifiable": tot[0],
        "unreadable": tot[1],
        "undeciphered": tot[2],
    }


raw = summarize(records)
# filter (keep >= 2 tokens) then exact dedup keeping the smallest id
kept = [r for r in records if len(count(r["text"])[3]) >= 2]
groups = {}
for r in kept:
    key = tuple(count(r["text"])[3])
    groups.setdefault(key, []).append(r["id"])
reps = {min(ids) for ids in groups.values()}
prepared = summarize([r for r in kept if r["id"] in reps])
prepared["duplicate_groups"] = sum(1 for ids in groups.values() if len(ids) > 1)
prepared["dropped_short"] = len(records) - len(kept)

with open(OUT / "corpus.audit.json", "w", encoding="utf-8") as f:
    json.dump({"raw": raw, "prepared_min_len_2": prepared}, f, indent=2)
    f.write("\n")

# --- a correction patch --------------------------------------------------------
first = records[0]
with open(OUT / "corpus.patch.jsonl", "w", encoding="utf-8") as f:
    f.write(json.dumps({"id": first["id"], "field": "provenance", "old": first.get("provenance", ""),
                        "new": "revised catalogue entry", "citation": "fixture"}, ensure_ascii=False) + "\n")

print(f"{len(pairs)} pairs, {len(families)} families, {len(records)} records -> {OUT}")
