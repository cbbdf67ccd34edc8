import numpy as np
import pytest

from chanscale import netgraph as ng


def random_plan(rng, max_convs=3, max_width=6, allow_pool=True):
    plan = []
    for _ in range(int(rng.integers(1, max_convs + 1))):
        plan.append(int(rng.integers(1, max_width + 1)))
        if allow_pool and rng.random() < 0.3:
            plan.append(ng.POOL)
    return tuple(plan)


def toy_model(rng, *, dtype=np.float64, size=8, in_channels=2, plan=None, scaling=False,
              s_range=(0.05, 0.95), bias_scale=0.1, num_outputs=1):
    """Random frozen-conv network; with ``scaling`` the s vectors are random in ``s_range``."""
    plan = plan if plan is not None else random_plan(rng)
    model = ng.build_vgg16_like(plan, (size, size, in_channels), num_outputs,
                                seed=int(rng.integers(2**31)), dtype=dtype)
    layers = []
    for layer in model.layers:
        if isinstance(layer, ng.Conv):
            bias = (rng.standard_normal(layer.bias.shape) * bias_scale).astype(dtype)
            layer = ng.Conv(layer.kernel, bias, frozen=True)
        elif isinstance(layer, ng.Dense):
            layer = ng.Dense(layer.weight, rng.standard_normal(layer.bias.shape).astype(dtype) * 0.1)
        layers.append(layer)
    model = model.replace(layers=tuple(layers))
    if scaling:
        model = ng.attach_scaling(model)
        layers = [ng.Scaling(rng.uniform(*s_range, layer.s.shape).astype(dtype))
                  if isinstance(layer, ng.Scaling) else layer for layer in model.layers]
        model = model.replace(layers=tuple(layers))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# PASS/FAIL lines from the acceptance module, echoed after the test run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
