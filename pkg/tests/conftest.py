import numpy as np
import pytest

from mqmk.backbone import BackboneConfig, PromptInsertionPlan, VisionTransformer
from mqmk.promptpool import PromptPool

TINY = BackboneConfig(image_size=8, patch_size=4, channels=3, embed_dim=8, num_layers=2, num_heads=2, mlp_ratio=2)
TINY_PLAN = PromptInsertionPlan(g_layers=(0,), e_layers=(0, 1), g_length=2, e_length=3)


@pytest.fixture
def tiny_vit():
    return VisionTransformer(TINY, TINY_PLAN, seed=0)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).uniform(size=(6, 3, 8, 8))


def make_pool(num_classes=6, tasks=((0, 1, 2), (3, 4, 5)), granularity=None, seed=0, dim=8, plan=TINY_PLAN):
    pool = PromptPool(dim, plan, num_classes, seed=seed)
    for classes in tasks:
        pool.expand(classes, len(classes) if granularity is None else granularity)
    return pool


# acceptance criteria report: one line per criterion, shown in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
