import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict

import numpy as np
import pytest
import torch

from pcda import pipeline as P
from pcda.nets import NetConfig


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run a test once with the compiled kernels and once with the numpy fallback."""
    if request.param == "numpy":
        monkeypatch.setenv("PCDA_DISABLE_NUMBA", "1")
    else:
        monkeypatch.delenv("PCDA_DISABLE_NUMBA", raising=False)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mini_cfg():
    return NetConfig.miniature()


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# --------------------------------------------------------------------------
# the three-seed toy study shared by the acceptance and study-property tests
# --------------------------------------------------------------------------

STUDY_SEEDS = (7, 8, 9)


@dataclass
class ToyStudy:
    root: Path
    config: P.AdaptationConfig
    nogap_config: P.AdaptationConfig
    gap: Dict[int, dict] = field(default_factory=dict)
    nogap: Dict[int, dict] = field(default_factory=dict)
    kept: Dict[int, dict] = field(default_factory=dict)
    gap_seconds: float = 0.0


def _stage_seconds(out_dir: Path) -> float:
    return sum(json.loads((out_dir / "timings.json").read_text()).values())


@pytest.fixture(scope="session")
def toy_study(tmp_path_factory):
    """Gap pair with every ablation and a no-gap pair, three seeds each.

    Set PCDA_STUDY_DIR to keep stage checkpoints between sessions.
    """
    root = Path(os.environ.get("PCDA_STUDY_DIR") or tmp_path_factory.mktemp("study"))
    config = P.AdaptationConfig.preset("toy-quick", ablations=tuple(P.ABLATIONS))
    copy = replace(P.TOY_SOURCE, name="toy_source_copy")
    nogap = replace(config, scenario=(P.TOY_SOURCE.name, copy.name), toy=P.ToyPair(P.TOY_SOURCE, copy),
                    ablations=("full",))
    study = ToyStudy(root, config, nogap)
    start = time.time()
    for seed in STUDY_SEEDS:
        keep = {}
        out = root / f"gap-{seed}"
        study.gap[seed] = P.run_scenario(replace(config, seed=seed), out, root / "data", root / "cache", keep=keep)
        study.kept[seed] = keep
    staged = sum(_stage_seconds(root / f"gap-{seed}") for seed in STUDY_SEEDS)
    study.gap_seconds = max(time.time() - start, staged)
    for seed in STUDY_SEEDS:
        study.nogap[seed] = P.run_scenario(replace(nogap, seed=seed), root / f"nogap-{seed}", root / "data",
                                           root / "cache")
    return study
