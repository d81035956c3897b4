"""Anonymize a profile and watch the leak detector catch planted leaks."""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from blindrank.anonymization import anonymize, build_profile, verify_no_leakage  # noqa: E402
from synthetic import LEAK_KINDS, make_corpus, plant_leak  # noqa: E402

raw = make_corpus(15)[5]
profile = build_profile(raw)
anon = anonymize(profile, seed=2026)

print("original:", raw.display_name, raw.country_code)
print("anonymized id:", anon.opaque_id)
print(json.dumps({k: anon.payload[k] for k in list(anon.payload)[:6]}, indent=2, ensure_ascii=False))
print("clean profile passes:", verify_no_leakage(profile, anon).passed)

print("\nplanted leaks:")
for kind in LEAK_KINDS:
    report = verify_no_leakage(profile, plant_leak(raw, anon, kind))
    failed = [name for name, rule in report.rules.items() if not rule.passed]
    print(f"  {kind:22s} caught={not report.passed}  rules={','.join(failed)}")
