import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def central_difference(f, x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. tensor ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f().item()
        flat[i] = old - h
        down = f().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(b.norm().item(), 1e-12))


@pytest.fixture
def fd_check():
    """Compare autograd and central differences for each tensor; returns max relative error."""

    def check(f, tensors, h=1e-3):
        worst = 0.0
        for x in tensors:
            x.grad = None
        f().backward()
        for x in tensors:
            analytic = x.grad.detach().clone()
            with torch.no_grad():
                numeric = central_difference(f, x, h)
            worst = max(worst, relative_error(analytic, numeric))
        return worst

    return check


def randomize_(module: torch.nn.Module, seed: int, scale: float = 0.5):
    """Overwrite every parameter with seeded noise (so zero-initialized gates are live)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def attention_margin(module: torch.nn.Module, f) -> float:
    """Smallest |pre-activation| entering a ReLU attention kernel during ``f()``.

    Central differences are only meaningful where no perturbation of size h
    crosses the ReLU kink, so gradient checks require this margin to exceed h.
    """
    seen = []
    hooks = [m.register_forward_hook(lambda _m, _i, out: seen.append(out.detach().abs().min().item()))
             for name, m in module.named_modules() if name.rsplit(".", 1)[-1] in ("qkv", "q", "kv")]
    try:
        with torch.no_grad():
            f()
    finally:
        for h in hooks:
            h.remove()
    return min(seen) if seen else float("inf")


TINY_MODEL = {"dit": {"d_model": 16, "n_heads": 2, "n_blocks": 1}, "motion_width": 8,
              "pre_restore": {"width": 8, "n_stages": 2, "shallow_feature_channels": 8}}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Two 12-image 16x16 manifests (0 and 90 degree linear blur) plus an untrained f=4 codec."""
    from blurprior.blur import BlurSpec, build_dataset
    from blurprior.codec import Codec, CodecConfig
    from blurprior.images import write_textures

    root = tmp_path_factory.mktemp("tiny")
    caps = write_textures(root / "tex", 12, 16, seed=3)
    m0 = build_dataset(root / "a0", root / "tex", [BlurSpec("linear", 0.0, 3.0)], caps, seed=1)
    m90 = build_dataset(root / "a90", root / "tex", [BlurSpec("linear", 90.0, 3.0)], caps, seed=2)
    torch.manual_seed(0)
    codec = Codec(CodecConfig(f=4, c_lat=4, width=8, max_width=8)).eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return {"root": root, "a0": root / "a0" / "manifest.json", "a90": root / "a90" / "manifest.json",
            "codec": codec, "manifests": (m0, m90)}


# --- trained artifacts shared by the slow and acceptance suites ----------------------

@pytest.fixture(scope="session")
def codec_artifact(tmp_path_factory):
    from artifacts import build_codec

    return build_codec(tmp_path_factory.mktemp("codec"))


@pytest.fixture(scope="session")
def toy_artifact(tmp_path_factory, codec_artifact):
    from artifacts import build_toy

    return build_toy(tmp_path_factory.mktemp("toy"), codec_artifact["codec"])


@pytest.fixture(scope="session")
def motion_artifact(tmp_path_factory):
    from artifacts import build_motion

    return build_motion(tmp_path_factory.mktemp("motion"))


@pytest.fixture(scope="session")
def ablation_artifact(tmp_path_factory, codec_artifact):
    from blurprior.experiments import AblationSetup, run_ablation

    return run_ablation(tmp_path_factory.mktemp("ablation"), codec_artifact["codec"], AblationSetup())


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, name: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {name} | {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return report
