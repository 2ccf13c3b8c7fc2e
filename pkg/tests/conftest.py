import pytest
import torch

from lgvq import CaptionDataset, TrainConfig, Trainer, make_toy_corpus
from lgvq import evaluation as ev

# Desk-scale smoke configuration shared by the training-level tests.
SMOKE = dict(steps=200, image_size=64, factor=8, codebook_size=64, lr=1e-3)


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    # tests that switch the default dtype must not leak it
    dtype = torch.get_default_dtype()
    yield
    torch.set_default_dtype(dtype)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), count=32, size=64, seed=0)


@pytest.fixture(scope="session")
def toy_dataset(toy_manifest):
    return CaptionDataset.from_manifest(toy_manifest, 64)


class SmokeRuns:
    """Lazily trains and caches smoke runs keyed by seed and config overrides."""

    def __init__(self, dataset, manifest):
        self.dataset = dataset
        self.manifest = manifest
        self._cache = {}

    def config(self, seed, **overrides):
        return TrainConfig().replace(manifest=str(self.manifest), seed=seed, **{**SMOKE, **overrides})

    def get(self, seed, **overrides):
        key = (seed, tuple(sorted(overrides.items())))
        if key not in self._cache:
            trainer = Trainer(self.config(seed, **overrides), self.dataset)
            psnr0 = ev.dataset_psnr(trainer.model, self.dataset)
            history = trainer.run()
            report = ev.evaluate(trainer.model, self.dataset)
            self._cache[key] = dict(trainer=trainer, history=history, psnr0=psnr0, report=report)
        return self._cache[key]


@pytest.fixture(scope="session")
def smoke(toy_dataset, toy_manifest):
    return SmokeRuns(toy_dataset, toy_manifest)


def central_difference(fn, tensor, eps=1e-4):
    """Numerical gradient of scalar ``fn()`` with respect to ``tensor`` (modified in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn().detach())
        flat[i] = orig - eps
        lo = float(fn().detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = a.detach().double(), b.detach().double()
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel():
    return rel_error


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
