import numpy as np
import pytest

from chainrft import harness
from chainrft import policy as pol
from chainrft.taskenv import build_question, generate_dataset, target_spec


@pytest.fixture(scope="session")
def vanilla_policy(tmp_path_factory):
    """One pretrained starting policy shared by the whole test session."""
    path = tmp_path_factory.mktemp("shared") / "vanilla.ckpt"
    cfg = harness.ExperimentConfig()
    p = harness.pretrain_vanilla(cfg.source, seed=0, cfg=cfg)
    pol.save_params(path, p)
    return pol.load_params(path)


@pytest.fixture(scope="session")
def target_questions():
    return generate_dataset(target_spec(), 20, seed=21)


@pytest.fixture()
def small_question():
    # 5 -> add 3 -> 8 -> mul 2 -> 16
    return build_question(5, [("add", 3), ("mul", 2)], seed=7, qid=42)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
