"""Pretrain the acoustic proficiency prior and look at what it predicts."""

import torch

from slagrade.corpus import generate_corpus
from slagrade.evaluation import rmse
from slagrade.speechprior import app_expected_score, app_pretrain

torch.set_num_threads(1)
train, test = generate_corpus(256, seed=1), generate_corpus(64, seed=2)
app = app_pretrain(train, "overall", seed=0)

probs = app.prior(test[0])
print("band probabilities:", [round(float(p), 3) for p in probs], "sum", float(probs.sum()))
print("expected score:", float(app_expected_score(probs)), "gold:", test[0].labels.overall)

pred = [float(app_expected_score(app.prior(s))) for s in test]
print(f"prior-only overall RMSE on held-out sessions: {rmse(pred, [s.labels.overall for s in test]):.3f}")
