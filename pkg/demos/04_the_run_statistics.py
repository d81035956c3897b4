"""Significance tests on the frozen 352-record THE run.

The fixture reproduces the published aggregates; this walks through the
paired Wilcoxon test on initial vs calibrated errors, McNemar on hit@50,
Kruskal-Wallis across tiers, and a bootstrap interval for MAE.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from blindrank import evalmetrics as em  # noqa: E402
from blindrank import stats  # noqa: E402
import the_run  # noqa: E402

records = the_run.load()
ae, ae0 = em.absolute_errors(records), em.absolute_errors(records, "initial")

print(f"MAE {em.mae(records):.1f}  median {em.median_ae(records):.1f}  PNMAE {em.pnmae(records, 2092):.2f}%")
print("hit@50", em.hit_rate(records, 50), " hit@100", em.hit_rate(records, 100))
print(f"Wilson lower bound @50: {em.wilson_claim(73, 352)}%")
print(f"kappa {em.cohens_kappa(em.tier_confusion(records)):.3f}")

w = stats.wilcoxon_signed_rank(ae0, ae)
print(f"\nWilcoxon W={w.statistic:.0f} p={w.p_value:.3f} ({w.method}, n={w.n})")
mc = stats.mcnemar(ae0 <= 50, ae <= 50)
print(f"McNemar chi2={mc.statistic:.3f} p={mc.p_value:.3f}")
groups = [ae[[r.tier == t for r in records]] for t in ("Elite", "Strong", "Mid", "Lower", "Tail")]
kw = stats.kruskal_wallis(groups)
print(f"Kruskal-Wallis H={kw.statistic:.2f} p={kw.p_value:.2g}")

ci = stats.bootstrap_ci(ae, np.mean, B=2000, seed=1, name="MAE")
print(f"MAE 95% bootstrap CI [{ci.lower:.1f}, {ci.upper:.1f}]")
