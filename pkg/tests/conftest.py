"""Shared fixtures.

The expensive artifact here is the overfit toy run: two synthetic scenes,
a small model, 2000 Adam steps.  Several acceptance checks (convergence,
noise-robustness ordering, channel sparsity, branch specialization) probe
the same trained model, so it is built once per session.
"""

from __future__ import annotations

import numpy as np
import pytest

from s3rnet.hsc import Scene
from s3rnet.hsi import DegradationConfig, SyntheticSceneSpec, make_scene_triple
from s3rnet.model import ModelConfig, S3RNet
from s3rnet.training import TrainConfig, fit

# the toy setup used by convergence/robustness/sparsity checks
TOY_HR = 32
TOY_BANDS = 16
TOY_MSI_BANDS = 4
TOY_SCALE = 4
TOY_SEED = 0


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(
        bands=TOY_BANDS,
        msi_bands=TOY_MSI_BANDS,
        scale=TOY_SCALE,
        base_channels=16,
        depths=(1, 1, 1, 1),
        growth=8,
        groups=4,
        reduction=2,
        group_size=1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_scene_spec(seed: int) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(
        num_endmembers=5, spectral_smoothness=3.0, blob_scale=3.0, seed=seed
    )


def make_toy_scenes(n: int, seed0: int = 100, hr: int = TOY_HR) -> list[Scene]:
    deg = DegradationConfig.for_scale(TOY_SCALE, TOY_BANDS, TOY_MSI_BANDS)
    scenes = []
    for i in range(n):
        y, xh, xm = make_scene_triple(toy_scene_spec(seed0 + i), hr, hr, TOY_BANDS, deg)
        scenes.append(Scene(f"{i:04d}", y, xh, xm, {"seed": seed0 + i}))
    return scenes


def toy_train_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=2000,
        batch_size=2,
        lr0=1e-3,
        sam_weight=0.1,
        seed=TOY_SEED,
        augment=False,
        checkpoint_interval=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def overfit_run():
    """(initial params, trained model, scenes, history) for the 2000-step toy run."""
    scenes = make_toy_scenes(2)
    model = S3RNet(toy_model_config(), seed=TOY_SEED)
    initial = {name: t.data.copy() for name, t in model.named_params()}
    history = fit(model, scenes, toy_train_config())
    return {
        "initial_params": initial,
        "model": model,
        "scenes": scenes,
        "history": history,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
