import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from icae_lab.icae import ICAE  # noqa: E402
from icae_lab.model import ModelConfig, init_base  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


TINY = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_positions=64)


def tiny_icae(cfg: ModelConfig = TINY, seed: int = 0, rate: float = 4.0, rank: int = 2,
              max_memory: int = 8, perturb: bool = True) -> ICAE:
    """Small ICAE; ``perturb`` moves LoRA B off zero so encoder gradients are generic."""
    model = ICAE.from_base(cfg, init_base(cfg, seed), rate=rate, lora_rank=rank,
                           lora_alpha=2.0 * rank, max_memory=max_memory, seed=seed)
    if perturb:
        import numpy as np

        rng = np.random.default_rng(seed + 100)
        for name, t in model.store.trainable().items():
            if name.endswith(".B"):
                t.data[:] = rng.normal(0, 0.1, t.data.shape)
    return model


@pytest.fixture
def tiny():
    return tiny_icae()


class FixedEnv:
    """Never finishes; every observation is ``obs_len`` bytes."""

    def __init__(self, obs_len: int = 400, system: str = "s" * 50, task_id: str = "fixed"):
        self.obs_len = obs_len
        self.system = system
        self.task_id = task_id
        self.seed = 0
        self.turns = 0

    def system_prompt(self) -> str:
        return self.system

    def step(self, action: str) -> str:
        self.turns += 1
        return (f"{self.turns:04d}" + "o" * self.obs_len)[: self.obs_len]

    finished = False
    resolved = False


# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
