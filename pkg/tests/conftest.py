import numpy as np
import pytest
import torch
from PIL import Image

from migan.data import DatasetKind, FundusSample, make_synthetic_dataset

torch.set_num_threads(1)

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and (rep.when == "call" or rep.failed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _ACCEPTANCE.append((marker.args[0], marker.args[1], status, item.name))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} ({name})")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth64():
    return make_synthetic_dataset(12, 64, seed=11)


def _disk(shape, centre, radius):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (np.hypot(yy - centre[0], xx - centre[1]) <= radius).astype(np.uint8)


def fake_fundus(shape, kind, seed=0, sample_id="s"):
    """Retina-like sample of arbitrary geometry with a circular FOV."""
    r = np.random.default_rng(seed)
    h, w = shape
    fov = _disk(shape, (h / 2, w / 2), 0.45 * min(h, w))
    mask = np.zeros(shape, dtype=np.uint8)
    for _ in range(6):
        c = int(r.integers(int(w * 0.2), int(w * 0.8)))
        mask[:, max(c - 2, 0):c + 2] = 1
        rr = int(r.integers(int(h * 0.2), int(h * 0.8)))
        mask[max(rr - 1, 0):rr + 2, :] = 1
    mask &= fov
    image = (np.stack([180 - 80 * mask, 90 - 50 * mask, 40 - 20 * mask], -1)
             + r.normal(0, 3, (h, w, 3))).clip(0, 255).round() * fov[..., None]
    return FundusSample(image=image.astype(np.float64), mask=mask, fov=fov, id=sample_id,
                        original_size=shape, kind=kind)


def write_layout(root, samples, with_fov=True, names=None):
    for sub in ("images", "masks") + (("fov",) if with_fov else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        img_name, mask_name, fov_name = names(i) if names else (s.id,) * 3
        Image.fromarray(s.image.astype(np.uint8)).save(root / "images" / f"{img_name}.png")
        Image.fromarray(s.mask * 255).save(root / "masks" / f"{mask_name}.png")
        if with_fov:
            Image.fromarray(s.fov * 255).save(root / "fov" / f"{fov_name}.png")
    return root


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("drive")
    samples = [fake_fundus((584, 565), DatasetKind.DRIVE, seed=i, sample_id=f"{21 + i}")
               for i in range(20)]
    # native DRIVE file naming: 21_training / 21_manual1 / 21_training_mask
    return write_layout(root, samples, names=lambda i: (f"{21 + i}_training", f"{21 + i}_manual1",
                                                        f"{21 + i}_training_mask"))


@pytest.fixture(scope="session")
def stare_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("stare")
    samples = [fake_fundus((605, 700), DatasetKind.STARE, seed=100 + i, sample_id=f"im{i:04d}")
               for i in range(10)]
    return write_layout(root, samples, with_fov=False)
