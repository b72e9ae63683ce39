import pytest

from dcednet.preprocess import PreprocessConfig, preprocess_pipeline
from dcednet.synthgen import SceneConfig, image_seed, render_scene
from dcednet.tensor import make_rng


def synthetic_samples(n, size=64, seed=0, tag="healthy", cells=10):
    """In-memory preprocessed synthetic samples, no disk round trip."""
    scene = SceneConfig.preset(tag, size=size, cells_per_image=cells, seed=seed)
    pre = PreprocessConfig(size=size)
    out = []
    for i in range(n):
        img, mask, counts = render_scene(make_rng(image_seed(seed, i)), scene)
        out.append(preprocess_pipeline(img, mask * 255, pre, tag, counts, f"img_{i:04d}"))
    return out


@pytest.fixture(scope="session")
def small_samples():
    return synthetic_samples(8, size=64, seed=3)


@pytest.fixture
def rng():
    return make_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
