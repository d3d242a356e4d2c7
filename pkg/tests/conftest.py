import numpy as np
import pytest

from poidet.autodiff import Tape, Tensor
from poidet.decoder import DecoderConfig, build_model
from poidet.geometry import BevGrid
from poidet.gradcheck import gradcheck_decoder_config, gradcheck_scene_config
from poidet.oracle import encode_oracle_features
from poidet.scenes import SceneConfig, generate_scene


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def check_grad(build, arrays, tol=1e-6, h=1e-5):
    """Compare taped gradients of scalar `build(*tensors)` with central FD."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
        tape.backward(out)
    for k, (t, a) in enumerate(zip(tensors, arrays)):
        def scalar(x, k=k):
            args = [arrays[j] if j != k else x for j in range(len(arrays))]
            return float(build(*[Tensor(v) for v in args]).data)
        num = fd_grad(scalar, a.copy(), h=h)
        assert rel_err(t.grad, num) < tol, f"input {k}: {t.grad} vs {num}"


def tiny_scene_config() -> SceneConfig:
    # 8x8 BEV map, one camera: small enough for finite differences
    return gradcheck_scene_config()


def tiny_decoder_config(**kw) -> DecoderConfig:
    base = gradcheck_decoder_config()
    if not kw:
        return base
    args = dict(channels=base.channels, groups=base.groups, heads=base.heads,
                ffn_hidden=base.ffn_hidden, iterations=base.iterations,
                num_classes=base.num_classes,
                view_selection=base.view_selection)
    args.update(kw)
    return DecoderConfig(**args)


@pytest.fixture
def tiny_setup():
    """(model, scene, atlas) at the gradcheck scale: 2 queries, G=2, C=16."""
    scene = generate_scene(tiny_scene_config(), seed=5)
    atlas = encode_oracle_features(scene, channels=16)
    model = build_model(tiny_decoder_config(), scene.grid, n_queries=2, seed=3)
    return model, scene, atlas


def perturb_params(named, seed=0, std=0.02, skip=()):
    """Randomize zero-initialized heads so gradcheck avoids ReLU kinks."""
    rng = np.random.default_rng(seed)
    for name, tensor in named.items():
        if name in skip:
            continue
        tensor.data += rng.normal(0.0, std, size=tensor.data.shape)
