"""Writes the 10-record EMBER-shaped fixture used by the parser and vectorizer tests."""
import json
import random
import sys

rng = random.Random(20240607)
libs = ["KERNEL32.dll", "USER32.dll", "ADVAPI32.dll"]
funcs = ["CreateFileA", "ReadFile", "WriteFile", "RegOpenKeyA", "MessageBoxA", "ExitProcess", "Sleep"]
props = ["CNT_CODE", "MEM_EXECUTE", "MEM_READ", "MEM_WRITE"]

lines = []
for i in range(10):
    rec = {
        "sha256": "%064x" % rng.getrandbits(256),
        "label": [0, 1, -1][i % 3],
        "histogram": [rng.randint(0, 50) for _ in range(8)],
        "byteentropy": [round(rng.uniform(0, 9), 3) for _ in range(8)],
        "strings": {
            "numstrings": rng.randint(0, 400),
            "avlength": round(rng.uniform(2, 20), 4),
            "printabledist": [rng.randint(0, 30) for _ in range(4)],
        },
        "general": {"size": rng.randint(1000, 90000), "has_debug": rng.random() < 0.5},
        "header": {"coff": {"timestamp": rng.randint(0, 2**31), "machine": "I386"},
                   "optional": {"major_linker_version": rng.randint(1, 14)}},
        "exports": rng.sample(["DllMain", "Start", "Run", "Init"], rng.randint(0, 2)),
        "section": {"entry": ".text", "sections": [
            {"name": n, "size": rng.randint(0, 5000), "props": rng.sample(props, rng.randint(1, 3))}
            for n in rng.sample([".text", ".data", ".rsrc", ".reloc"], 2)]},
        "datadirectories": [{"name": "IMPORT_TABLE", "size": rng.randint(0, 300), "virtual_address": rng.randint(0, 9000)}],
    }
    if i % 3 == 1:
        rec["avclass"] = rng.choice(["zbot", "emotet"])
    chosen = [(rng.choice(libs), rng.choice(funcs)) for _ in range(rng.randint(0, 6))]
    if i % 2 == 0:
        imports = {}
        for lib, fn in chosen:
            imports.setdefault(lib, []).append(fn)
        rec["imports"] = imports
    else:
        rec["imports"] = ["%s:%s" % c for c in chosen]
    lines.append(json.dumps(rec))

with open(sys.argv[1], "w") as f:
    f.write("\n".join(lines) + "\n")
