"""Classifying digits from a single pixel column.

Only the centre column (28 pixels) of each image reaches the encoder, so
several digits look alike and the latent posterior should have several
modes.  We train a VIB classifier with a five-component posterior under
SIWAE and under SELBO and compare accuracy and calibration.
"""

import numpy as np

from mixvi.experiments import DigitProfile, digit_splits, run_classify

p = DigitProfile.named("full", epochs=5, S=300)
data = digit_splits(p, seed=0)
train_ds, test_ds, source = data
print(f"data: {source}, {len(train_ds)} train / {len(test_ds)} test, input width {train_ds.inputs.shape[1]}")

results = {}
for loss in ("siwae", "selbo"):
    out = run_classify(loss, K=5, T=5, seed=0, p=p, data=data)
    results[loss] = out
    rep = out["report"]
    print(f"{loss:>5}: accuracy {rep['accuracy']:.3f}  ECE {rep['ece']:.3f}")

# how many components carry weight for a typical test input?
for loss, out in results.items():
    q = out["model"].encode(test_ds.inputs[:500])
    alpha = np.exp(q.log_weights().value)
    active = (alpha > 0.05).sum(axis=1)
    print(f"{loss}: mean number of components above 5% weight = {active.mean():.2f}")

# confidence histogram of the predicted class
for loss, out in results.items():
    conf = out["probs"].max(axis=1)
    hist, _ = np.histogram(conf, bins=[0, 0.25, 0.5, 0.75, 0.9, 1.0])
    print(f"{loss}: predicted-class confidence counts {hist.tolist()}")
