import numpy as np
import pytest

from ixgrpo.scenegen import IntrinsicStack


def random_stack(rng: np.random.Generator, h: int = 8, w: int = 8) -> IntrinsicStack:
    """Random but valid intrinsic stack (values quantized so ties occur)."""
    albedo = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=(h, w, 3)) + rng.uniform(0, 0.05, (h, w, 3))
    n = rng.normal(size=(h, w, 3))
    n[..., 2] = np.abs(n[..., 2]) + 0.05
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return IntrinsicStack(
        albedo=albedo.astype(np.float32),
        depth=rng.uniform(0.05, 1.0, (h, w)).astype(np.float32),
        normals=n.astype(np.float32),
        irradiance=rng.uniform(0.0, 1.0, (h, w)).astype(np.float32),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# filled by the acceptance tests, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
