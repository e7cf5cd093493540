"""
The whole pipeline on a toy corpus
==================================

Synthetic wafer images go through every stage into a run directory: detector
training, score maps, masks and crops, encoder pretraining, class count,
discovery training and metrics. The corpus here is tiny so the script ends in
seconds; the numbers mean little at this size. ``icnd run-all`` does the same
with the full demo configuration.
"""
import json
import sys
import tempfile
from pathlib import Path

from icnd import pipeline
from icnd.data import CorpusConfig

corpus = CorpusConfig(size=112, n_train_normal=8, n_test_normal=4, n_test_defect=4,
                      n_labeled=4, n_unlabeled=4, n_test_per_class=2).to_dict()
config = pipeline.RunConfig(
    seed=7, corpus=corpus, detector={"steps": 30, "batch": 4, "aug_shifts": 1},
    discovery={"pretrain_steps": 10, "steps": 20, "normal_crops": 4, "k_min": 3, "k_max": 6,
               "hyper": {"batch": 8}})

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="icnd_"))
metrics = pipeline.run_pipeline(config, root)

# one log line per stage, each stamped with the config hash
for line in (root / "run.log").read_text().splitlines():
    entry = json.loads(line)
    print(f"{entry['stage']:>16}  {entry['seconds']:6.2f}s")
print(json.dumps(metrics, indent=1, sort_keys=True))
print("artifacts in", root)
