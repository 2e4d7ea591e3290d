"""The standard N = 500 two-block SBM fixture used by the acceptance suite and the CLI defaults."""

from __future__ import annotations

from dataclasses import dataclass

from .attack import PerturbationSet, greedy_poison, random_perturb
from .data import SbmSpec, sbm_generate, split_reliable
from .graph import GraphData
from .models import ModelArch, TrainConfig

# ReLU hidden layers: the sigmoid stack sits at chance for 50-180 epochs under
# plain gradient descent, so a rollback there throws away most of the run.
FIXTURE_ARCH = ModelArch(kind="GCN", layer_dims=(16, 16, 16, 2), activation="relu")
FIXTURE_LR = 0.3
FIXTURE_EPOCHS = 200


@dataclass
class Fixture:
    clean: GraphData
    poisoned: GraphData
    perturbations: PerturbationSet
    arch: ModelArch
    train_cfg: TrainConfig
    seed: int


def fixture_train_config(seed: int = 0, **kw) -> TrainConfig:
    kw.setdefault("learning_rate", FIXTURE_LR)
    kw.setdefault("max_epochs", FIXTURE_EPOCHS)
    return TrainConfig(seed=seed, **kw)


def clean_fixture(seed: int = 0, spec: SbmSpec | None = None, reliable_fraction: float = 0.1) -> GraphData:
    spec = spec or SbmSpec(seed=seed)
    return split_reliable(sbm_generate(spec), reliable_fraction, seed=seed)


def build_fixture(seed: int = 0, rate: float = 0.2, attack: str = "greedy", spec: SbmSpec | None = None,
                  arch: ModelArch = FIXTURE_ARCH, shortlist: int = 8, retrain_every: int | None = 20) -> Fixture:
    """Clean SBM graph, its poisoned copy and the ground-truth flips.

    ``attack="greedy"`` poisons with a surrogate of the same architecture
    trained like the victim and retrained every ``retrain_every`` flips;
    ``"random"`` flips uniformly at random.
    """
    g = clean_fixture(seed, spec)
    cfg = fixture_train_config(seed)
    budget = int(round(rate * len(g.edges)))
    if attack == "greedy":
        gp, ps = greedy_poison(g, arch, budget, seed=seed, train_cfg=cfg, shortlist=shortlist,
                              retrain_every=retrain_every)
    elif attack == "random":
        gp, ps = random_perturb(g, rate, seed=seed)
    elif attack == "none":
        gp, ps = g, PerturbationSet(rate=0.0, seed=seed)
    else:
        raise ValueError(f"unknown attack {attack!r}")
    return Fixture(g, gp, ps, arch, cfg, seed)
