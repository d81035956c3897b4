"""Hide one university, then try every way of getting its rank back.

Builds a small synthetic ranking, hides one member and sweeps the whole
rank range through the calibration tools. The hidden member never comes
back; asking for it by name gets a refusal. The shared store is untouched.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from blindrank.ranking_store import execute_tool, hide, verify_hidden  # noqa: E402
from synthetic import make_world  # noqa: E402

store, raws, _ = make_world(100)
target = raws[41].display_name
before = store.fingerprint()

view = hide(store, target)
print(f"hidden: {target}  visible entries: {len(view)} of {len(store)}")
print("verify_hidden:", verify_hidden(view, target))

seen = set()
for lo in range(1, 101, 10):
    res = execute_tool(view, "get_ranking_samples", {"system": "THE", "rankMin": lo, "rankMax": lo + 9, "count": 20})
    seen.update(s["name"] for s in res["samples"])
print(f"full sweep returned {len(seen)} names; target among them: {target in seen}")

print("ask by name:", execute_tool(view, "compute_metrics", {"universityName": target}))
print("ask case-folded:", execute_tool(view, "compute_metrics", {"universityName": target.upper()})["error"])

del view
print("store unchanged after release:", store.fingerprint() == before)
