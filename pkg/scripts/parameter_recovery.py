"""Coverage of true regression coefficients by 90% HPD intervals on synthetic replicates."""

import argparse
import json
from dataclasses import asdict, dataclass

import numpy as np

from spatial_restore.gaft import PriorConfig
from spatial_restore.mcmc import McmcConfig, run_mcmc
from spatial_restore.report import hpd_interval
from spatial_restore.synthetic import COVARIATES, model_spec, replicate


@dataclass
class RecoveryConfig:
    replicates: int = 20
    first_seed: int = 0
    prob: float = 0.90
    frailty: str = "icar"


def run(cfg: RecoveryConfig) -> dict:
    hits = np.zeros(len(COVARIATES) + 1)
    bias = np.zeros_like(hits)
    for r in range(cfg.first_seed, cfg.first_seed + cfg.replicates):
        ds, truth, g = replicate(r)
        s = run_mcmc(ds, g if cfg.frailty == "icar" else None, model_spec(cfg.frailty), PriorConfig(),
                     McmcConfig.quick(seed=r))
        beta = s.pooled("beta")
        for j, b in enumerate(truth.beta):
            lo, hi = hpd_interval(beta[:, j], cfg.prob)
            hits[j] += lo <= b <= hi
        bias += beta.mean(axis=0) - truth.beta
        print(f"replicate {r}: running coverage {np.round(hits / (r - cfg.first_seed + 1), 2).tolist()}", flush=True)
    names = ("intercept",) + COVARIATES
    return {"config": asdict(cfg),
            "coverage": dict(zip(names, (hits / cfg.replicates).tolist())),
            "mean_bias": dict(zip(names, (bias / cfg.replicates).tolist()))}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    for f, v in asdict(RecoveryConfig()).items():
        ap.add_argument("--" + f.replace("_", "-"), type=type(v), default=v)
    print(json.dumps(run(RecoveryConfig(**vars(ap.parse_args()))), indent=2))


if __name__ == "__main__":
    main()
