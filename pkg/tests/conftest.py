import numpy as np
import pytest

from teachaug.augment import AugmentationPolicy


def make_policy(seed=0, randomize=True, noise_dim=8, context_dim=0, hidden=16, scale=1.0,
                drop_ratio=0.8):
    """A small policy; with ``randomize`` the zero output layers get random weights."""
    rng = np.random.default_rng(seed)
    pol = AugmentationPolicy(rng, context_dim=context_dim, noise_dim=noise_dim, rgb_hidden=hidden,
                             noise_hidden=hidden, geo_hidden=hidden, drop_ratio=drop_ratio)
    if randomize:
        for mlp in (pol.color.rgb_path, pol.color.noise_path, pol.geo.mlp):
            mlp.fc3.weight.data = rng.standard_normal(mlp.fc3.weight.shape) * scale
            mlp.fc3.bias.data = rng.standard_normal(mlp.fc3.bias.shape) * scale
        pol.gate_logit_c.data = np.asarray(rng.normal())
        pol.gate_logit_g.data = np.asarray(rng.normal())
    return pol


def random_images(rng, b=4, h=8, w=8, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=(b, h, w, 3))


@pytest.fixture
def small_policy():
    return make_policy()


# -- acceptance report ------------------------------------------------------------
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def accept():
    """Record one acceptance verdict; the terminal summary prints them all."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"acceptance {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"acceptance {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
