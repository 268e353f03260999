"""Fine-tune the session-level multi-target grader and evaluate it.

Uses a shrunken backbone so it finishes in under a minute on one core.
"""

import torch

from slagrade.backbone import ModelConfig, parameter_count
from slagrade.corpus import generate_corpus
from slagrade.evaluation import evaluate
from slagrade.graders import fit_session_grader
from slagrade.speechprior import app_pretrain
from slagrade.train import TrainConfig

torch.set_num_threads(1)
train, test = generate_corpus(128, seed=3), generate_corpus(32, seed=4)
mcfg = ModelConfig(d_model=32, n_layers=1, n_heads=2, use_prior=True)
print("parameters:", parameter_count(mcfg))

app = app_pretrain(train, "overall", seed=0)
grader, trainer = fit_session_grader(train, mcfg, TrainConfig(warmup_steps=5, lr=1e-3), app)
print("per-epoch loss:", [round(x, 3) for x in trainer.epoch_losses()])

report, _ = evaluate(grader, test, ("part_mean", "ori_head"), model="mtl_app")
print(report.to_text())
