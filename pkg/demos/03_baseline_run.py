"""A complete evaluation run with the deterministic k-NN baseline.

Runs the two-stage protocol over a stratified synthetic test set, writes
the resumable run log, and prints the headline metrics and the per-tier
table. No network access or model endpoint is needed.
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from blindrank import harness as hz  # noqa: E402
from blindrank.backends import KnnBaselineBackend  # noqa: E402
from synthetic import make_world  # noqa: E402

store, _, members = make_world(300, noise=0.3)
testset = members[::3]

with tempfile.TemporaryDirectory() as tmp:
    run = hz.evaluate_batch(testset, store, KnnBaselineBackend(), tmp, concurrency=3, delay_ms=0)
    print(f"attempts {run.attempts}  records {len(run.records)}  failures {len(run.failures)}")
    summary = hz.summarize_run(run, store)
    for label, value in summary.calibrated.table_rows():
        print(f"  {label:28s} {value}")
    print("\nlog lines:", sum(1 for _ in open(Path(tmp) / hz.LOG_NAME)))
