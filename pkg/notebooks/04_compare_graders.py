"""Seed-averaged comparison of MTL, MTL-APP and the response-level CTG baseline.

Full size takes several minutes; pass --quick for a small smoke version.
"""

import sys

import torch

from slagrade.backbone import ModelConfig
from slagrade.benchmark import run_benchmark
from slagrade.train import TrainConfig

torch.set_num_threads(1)
if "--quick" in sys.argv:
    res = run_benchmark(seeds=(1,), n_train=64, n_eval=32,
                        model_cfg=ModelConfig(d_model=16, n_layers=1, n_heads=2),
                        train_cfg=TrainConfig(warmup_steps=4, lr=1e-3), log=print)
else:
    res = run_benchmark(log=print)
print(res.table())
