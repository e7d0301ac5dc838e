"""Fooling a classifier that works on reconstructed signals.

Even when the reconstruction map itself is robust, the composition
classifier-after-reconstruction inherits the usual adversarial
vulnerability of classifiers: small measurement perturbations flip the
predicted class while the reconstruction still looks right.  Signals are
labeled by the parity of their jump count; accuracy under the margin
attack drops with the perturbation budget.
"""

from robustcs import bench

config = {
    "schema_version": 1,
    "scenario": {"N": 64, "m": 32, "jumps_min": 2, "jumps_max": 4, "min_gap": 5},
    "eta_grid": [0.05, 0.15, 0.3],
    "n_signals": 8,
    "train": {"size": 300, "epochs": 10, "jitter_bound": 0.05},
    "classify": {"rec": "postproc", "train_size": 300, "epochs": 30},
    "attack": {"steps": 30, "restarts": 2, "polish_steps": 20},
    "out": "results/demo05",
}

curve = bench.classification_experiment(config)
print("accuracy of classify(reconstruct(y + e)) under margin attack:\n")
for level, acc in curve:
    bar = "#" * int(round(40 * acc))
    print(f"  rel noise {100 * level:5.1f}%  accuracy {100 * acc:5.1f}%  {bar}")
