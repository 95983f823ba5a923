"""Synthetic restoration-time data on a county-sized areal graph.

Covariate marginals roughly follow a hurricane outage setting: wind speed
(mph), % customers out, % served by investor-owned utilities, power plant
count, median income (USD 10k) and % non-white population.
"""

from __future__ import annotations

import numpy as np

from .dataset import AdjacencyGraph, Dataset, areal_test_graph
from .gaft import GaftParams, ModelSpec, sample_icar, simulate_dataset
from .ldtfp import LdtfpTree, n_nodes

COVARIATES = ("wind", "outage", "investor", "plants", "income", "nonwhite")

# published CAR-model posterior means, used as ground truth
REFERENCE_BETA = np.array([-0.746, 0.013, 0.0117, 0.0062, -0.015, -0.072, -0.001])
REFERENCE_TAU2 = 0.212
REFERENCE_SIGMA2 = 0.16
TREE_DEPTH = 4


def covariate_generator(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.column_stack([
        rng.normal(62.0, 25.0, n),
        rng.normal(77.0, 17.0, n),
        rng.uniform(0.0, 100.0, n),
        rng.poisson(3.9, n).astype(float),
        rng.normal(4.6, 0.9, n),
        rng.gamma(1.3, 11.5, n),
    ])


def bimodal_tree(depth: int = TREE_DEPTH, q: int = len(COVARIATES) + 1, shift: float = 0.8,
                 skew_covariate: int | None = None, skew: float = 0.0) -> LdtfpTree:
    """Median-zero tree whose level-2 splits push mass outward; optional covariate skew there."""
    g = np.zeros((n_nodes(depth), q))
    if depth >= 2:
        g[1, 0], g[2, 0] = -shift, shift
        if skew_covariate is not None:
            g[1:3, skew_covariate] = skew
    return LdtfpTree(depth, g)


def model_spec(frailty: str = "icar", depth: int = TREE_DEPTH) -> ModelSpec:
    return ModelSpec(COVARIATES, frailty_mode=frailty, tree_depth=depth)


def true_params(graph: AdjacencyGraph, rng: np.random.Generator, tau2: float = REFERENCE_TAU2,
                sigma2: float = REFERENCE_SIGMA2, tree: LdtfpTree | None = None) -> GaftParams:
    tree = tree or bimodal_tree()
    return GaftParams(REFERENCE_BETA.copy(), sample_icar(graph, tau2, rng), tau2, sigma2, 1.0, tree)


def replicate(seed: int, graph: AdjacencyGraph | None = None, tau2: float = REFERENCE_TAU2,
              sigma2: float = REFERENCE_SIGMA2) -> tuple[Dataset, GaftParams, AdjacencyGraph]:
    """One dataset with a fresh frailty field; deterministic in ``seed``."""
    graph = graph or areal_test_graph()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    truth = true_params(graph, rng, tau2, sigma2)
    ds = simulate_dataset(model_spec("icar"), truth, graph, covariate_generator, seed=seed)
    return ds, truth, graph
