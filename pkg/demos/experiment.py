"""
The training regimes side by side
=================================

Run the small demo configuration end to end: clean P2G training, DANP
(training on noisy S2P beam outputs) and randomized TKM (marginalizing the
P2G likelihood over sampled subsets of the top-K phoneme hypotheses), each
decoded from the best path and with TKM decoding, then LM re-scoring.

The demo config is sized to finish in about a minute, which is too small for
the regimes to separate reliably. Pass a config path to run something bigger,
e.g. the bundled ``acceptance.json`` (about five minutes per seed on one core).
"""

import json
import sys
from pathlib import Path

from spg.cli import CONFIG_DIR
from spg.pipeline import ExperimentConfig, report_table, run_experiment

path = Path(sys.argv[1]) if len(sys.argv) > 1 else CONFIG_DIR / "demo.json"
cfg = ExperimentConfig.from_dict(json.loads(path.read_text()))
report = run_experiment(cfg, log=print)

# %%
print()
print(report_table(report))

# %%
lm = report["lm"]
print(f"\nLM weight {lm['lambda']:g}: homophone WER "
      f"{lm['test_homophone_wer_lambda0']:.4f} -> {lm['test_homophone_wer_tuned']:.4f}")
for s in report["significance"]:
    print(f"{s['a']:>18} vs {s['b']:<18} p = {s['p_value']:.3g}")
