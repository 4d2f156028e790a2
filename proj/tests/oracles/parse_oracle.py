"""Independent reader and count vectorizer for the fixture; writes the frozen expectations."""
import json
import sys
from collections import Counter

HIST, ENTROPY, PRINTABLE, CAP = 8, 8, 4, 5


def flatten(node, prefix, out):
    if isinstance(node, bool):
        out[prefix] = 1.0 if node else 0.0
    elif isinstance(node, (int, float)):
        out[prefix] = float(node)
    elif isinstance(node, dict):
        for k, v in node.items():
            flatten(v, prefix + "." + k, out)
    elif isinstance(node, list):
        for item in node:
            if isinstance(item, dict) and isinstance(item.get("name"), str):
                for k, v in item.items():
                    if k != "name":
                        flatten(v, prefix + "." + item["name"] + "." + k, out)


def read(line):
    doc = json.loads(line)
    imports = doc.get("imports", [])
    if isinstance(imports, dict):
        imports = [lib + ":" + fn for lib, fns in imports.items() for fn in fns]
    sections = []
    for s in doc.get("section", {}).get("sections", []):
        sections.append(s["name"])
        sections.extend(s.get("props", []))
    header = {}
    for key in ("general", "header", "datadirectories"):
        if key in doc:
            flatten(doc[key], key, header)
    for k, v in doc.get("strings", {}).items():
        if k != "printabledist":
            flatten(v, "strings." + k, header)
    label = {0: "benign", 1: "malicious"}.get(doc.get("label"), "unknown")
    return {
        "sha256": doc["sha256"],
        "label": label,
        "avclass": doc.get("avclass"),
        "histogram": [float(v) for v in doc["histogram"]],
        "byteentropy": [float(v) for v in doc["byteentropy"]],
        "printabledist": [float(v) for v in doc["strings"]["printabledist"]],
        "imports": sorted(imports),
        "exports": sorted(doc.get("exports", [])),
        "section_properties": sorted(sections),
        "header_fields": header,
    }


def vocab(records, field):
    counts = Counter(t for r in records for t in r[field])
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:CAP]]


records = [read(l) for l in open(sys.argv[1]) if l.strip()]
vocabs = {f: vocab(records, f) for f in ("imports", "exports", "section_properties")}
header_names = sorted({k for r in records for k in r["header_fields"]})
vectors = []
for r in records:
    v = r["histogram"] + r["byteentropy"] + r["printabledist"]
    for f in ("imports", "exports", "section_properties"):
        c = Counter(r[f])
        v += [float(c[t]) for t in vocabs[f]]
    v += [r["header_fields"].get(h, 0.0) for h in header_names]
    vectors.append(v)

json.dump({"records": records, "cap": CAP, "vocabularies": vocabs, "header_fields": header_names,
           "vectors": vectors}, open(sys.argv[2], "w"), indent=1, sort_keys=True)
