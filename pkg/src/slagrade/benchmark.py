"""Seed-averaged synthetic benchmark: MTL, MTL-APP and CTG on fresh corpora."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelConfig
from .corpus import GenConfig, generate_corpus, noise_floor
from .evaluation import EvalReport, evaluate
from .graders import CtgGrader, fit_session_grader
from .scale import TARGETS
from .speechprior import app_pretrain
from .train import TrainConfig

SPLIT_INDEX = {"train": 0, "dev": 1, "eval": 2}


def split_seed(seed: int, split: str | int) -> int:
    """Seed of one split of the corpus generated from ``seed``."""
    k = SPLIT_INDEX[split] if isinstance(split, str) else split
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def make_splits(seed: int, n_train: int = 512, n_eval: int = 128, cfg: GenConfig | None = None):
    train = generate_corpus(n_train, split_seed(seed, "train"), cfg, id_prefix="train-")
    test = generate_corpus(n_eval, split_seed(seed, "eval"), cfg, id_prefix="eval-")
    return train, test


@dataclass
class BenchmarkResult:
    seeds: tuple[int, ...]
    noise_floor: dict[str, float]
    reports: dict[str, list[EvalReport]] = field(default_factory=dict)
    model_seconds: dict[str, float] = field(default_factory=dict)
    epoch_losses: dict[str, list[list[float]]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean_rmse(self, model: str, target: str = "overall") -> float:
        vals = [r.overall_rmse() if target == "overall" else r.targets[target].rmse
                for r in self.reports[model]]
        return float(np.mean(vals))

    def mean_pcc(self, model: str) -> float:
        return float(np.mean([r.overall[r.overall_mode].pcc for r in self.reports[model]]))

    def table(self) -> str:
        lines = [f"{'model':<9}" + "".join(f"{t:>9}" for t in TARGETS) + f"{'pcc':>9}"]
        for m in self.reports:
            lines.append(f"{m:<9}" + "".join(f"{self.mean_rmse(m, t):>9.3f}" for t in TARGETS)
                         + f"{self.mean_pcc(m):>9.3f}")
        lines.append(f"{'floor':<9}" + "".join(f"{self.noise_floor[t]:>9.3f}" for t in TARGETS))
        return "\n".join(lines)


def run_benchmark(seeds=(1, 2, 3), models=("mtl", "mtl_app", "ctg"), n_train: int = 512,
                  n_eval: int = 128, gen_cfg: GenConfig | None = None,
                  model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                  log=None) -> BenchmarkResult:
    """Train each model once per seed; the seed picks the corpus and the training run."""
    gen_cfg = gen_cfg or GenConfig()
    base_model = model_cfg or ModelConfig()
    base_train = train_cfg or TrainConfig()
    res = BenchmarkResult(tuple(seeds), noise_floor(gen_cfg), {m: [] for m in models},
                          {m: 0.0 for m in models}, {m: [] for m in models})
    t0 = time.perf_counter()
    for seed in seeds:
        train, test = make_splits(seed, n_train, n_eval, gen_cfg)
        tcfg = TrainConfig(**{**base_train.__dict__, "seed": seed})
        for m in models:
            t_model = time.perf_counter()
            if m == "ctg":
                grader, trainer = CtgGrader.fit(train, base_model, tcfg)
            else:
                use_prior = m == "mtl_app"
                mcfg = ModelConfig.from_dict({**base_model.to_dict(), "use_prior": use_prior,
                                              "adapter_seed": seed})
                app = app_pretrain(train, "overall", seed=seed) if use_prior else None
                grader, trainer = fit_session_grader(train, mcfg, tcfg, app)
            report, _ = evaluate(grader, test, "part_mean", model=m)
            res.model_seconds[m] += time.perf_counter() - t_model
            res.epoch_losses[m].append(trainer.epoch_losses())
            res.reports[m].append(report)
            if log is not None:
                log(f"seed {seed} {m}: overall rmse {report.overall_rmse():.3f} "
                    f"({time.perf_counter() - t0:.0f}s)")
    res.seconds = time.perf_counter() - t0
    return res
