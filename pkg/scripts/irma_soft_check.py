"""Qualitative checks on a user-supplied county restoration dataset and adjacency list.

Prints the global Moran's I, the set of significant LISA labels and the sign of
each posterior coefficient mean next to the expected sign.
"""

import argparse
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from spatial_restore.dataset import parse_adjacency, parse_dataset
from spatial_restore.gaft import ModelSpec, PriorConfig
from spatial_restore.mcmc import McmcConfig, run_mcmc
from spatial_restore.report import posterior_summary
from spatial_restore.spatial import local_moran_analysis, permutation_test_global, weights

EXPECTED_SIGNS = {"wind": 1, "outage": 1, "investor": 1, "plants": -1, "income": -1}


@dataclass
class SoftCheckConfig:
    data: str
    adjacency: str
    depth: int = 4
    seed: int = 0
    n_perm: int = 999


def run(cfg: SoftCheckConfig) -> dict:
    ds = parse_dataset(Path(cfg.data).read_text())
    g = parse_adjacency(Path(cfg.adjacency).read_text(), ds.unit_ids)
    W = weights(g)
    glob = permutation_test_global(ds.event_times, W, cfg.n_perm, seed=cfg.seed)
    local = local_moran_analysis(ds.event_times, W, cfg.n_perm, seed=cfg.seed)
    s = run_mcmc(ds, g, ModelSpec(ds.covariate_names, frailty_mode="icar", tree_depth=cfg.depth), PriorConfig(),
                 McmcConfig.quick(seed=cfg.seed))
    signs = {c.name: int(np.sign(c.mean)) for c in posterior_summary(s)[1:]}
    return {"global_I": glob.I, "pseudo_p": glob.pseudo_p,
            "lisa_labels": sorted(set(local.labels) - {"NotSignificant"}),
            "signs": {k: {"observed": signs.get(k), "expected": v} for k, v in EXPECTED_SIGNS.items()}}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--adjacency", required=True)
    for f, v in list(asdict(SoftCheckConfig("", "")).items())[2:]:
        ap.add_argument("--" + f.replace("_", "-"), type=type(v), default=v)
    print(json.dumps(run(SoftCheckConfig(**vars(ap.parse_args()))), indent=2))


if __name__ == "__main__":
    main()
