"""Randomized finite-difference cases shared by the unit and acceptance suites."""
import numpy as np

from compvid import tensor as T
from compvid.conditions import ConditionSet
from compvid.denoiser import Denoiser, collate
from compvid.diffusion import NoiseSchedule, diffusion_loss
from compvid.tensor import Tape, Tensor, backward, gradcheck

from conftest import tiny_config


def _cases():
    r = np.random.default_rng(7)
    n = r.standard_normal
    return [
        ("conv2d 2x3x5x5 k3 pad1", lambda x, w, b: T.conv2d(x, w, b, padding=1), [n((2, 3, 5, 5)), n((4, 3, 3, 3)), n(4)]),
        ("conv2d stride2 1x2x7x7", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [n((1, 2, 7, 7)), n((3, 2, 3, 3)), n(3)]),
        ("conv2d 1x1 kernel", lambda x, w: T.conv2d(x, w), [n((2, 3, 4, 3)), n((2, 3, 1, 1))]),
        ("conv2d k5 pad2", lambda x, w: T.conv2d(x, w, padding=2), [n((1, 1, 6, 6)), n((2, 1, 5, 5))]),
        ("temporal_conv1d 4-frame", T.temporal_conv1d, [n((4, 2, 3, 3)), n((3, 2, 3)), n(3)]),
        ("temporal_conv1d batched", T.temporal_conv1d, [n((2, 3, 2, 2, 2)), n((2, 2, 3)), n(2)]),
        ("temporal_conv1d one frame", T.temporal_conv1d, [n((1, 2, 2, 3)), n((2, 2, 3))]),
        ("attention 3x4/5x4/5x2", T.attention, [n((3, 4)), n((5, 4)), n((5, 2))]),
        ("attention batched", T.attention, [n((2, 3, 4)), n((2, 6, 4)), n((2, 6, 3))]),
        ("group_norm 4d", lambda x, g, b: T.group_norm(x, 2, g, b), [n((2, 4, 3, 3)), n(4), n(4)]),
        ("group_norm one group", lambda x, g, b: T.group_norm(x, 1, g, b), [n((3, 6, 2)), n(6), n(6)]),
        ("linear", T.linear, [n((4, 5)), n((5, 3)), n(3)]),
        ("linear 3d input", T.linear, [n((2, 3, 4)), n((4, 2))]),
        ("matmul batched", T.matmul, [n((2, 3, 4)), n((2, 4, 5))]),
        ("silu", T.silu, [n((3, 4))]),
        ("mul broadcast", T.mul, [n((3, 4)), n((1, 4))]),
        ("add broadcast", T.add, [n((2, 3, 4)), n(4)]),
        ("sub", T.sub, [n((3, 3)), n((3, 3))]),
        ("square then mean", lambda x: T.mean(T.square(x), axis=1), [n((3, 5))]),
        ("sum keepdims", lambda x: T.sum(x, axis=0, keepdims=True), [n((4, 3))]),
        ("concat axis 1", lambda a, b: T.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        ("transpose+reshape", lambda x: T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)), [n((2, 3, 4))]),
        ("avg_pool2x", T.avg_pool2x, [n((1, 2, 4, 6))]),
        ("upsample2x", T.upsample2x, [n((1, 2, 3, 2))]),
        ("embedding table", lambda t: T.embedding(t, np.array([[0, 2, -1], [1, 1, 3]])), [n((4, 3))]),
        ("mse", T.mse, [n((3, 4)), n((3, 4))]),
    ]


def op_cases():
    return _cases()


def run_op_case(case) -> float:
    _, fn, inputs = case
    return gradcheck(fn, [np.asarray(a, dtype=np.float64) for a in inputs])


# ---------------------------------------------------------------- end-to-end loss probe

def _model(dtype: str, seed: int = 5):
    m = Denoiser(tiny_config(dtype=dtype, seed=seed))
    r = np.random.default_rng(seed + 1)
    # wake the zero-initialized condition projections so every path carries gradient
    for k, p in m.named_parameters():
        if k.startswith("stc/") and k.endswith("proj.weight"):
            p.data = (r.standard_normal(p.shape) * 0.1).astype(p.dtype)
    return m


def _loss_inputs(cfg):
    r = np.random.default_rng(11)
    f = 2
    h, w = cfg.height // cfg.factor, cfg.width // cfg.factor
    z0 = r.uniform(-1, 1, (2, f, h, w, cfg.latent_channels))
    conds = [ConditionSet(text="a red circle moving left", motion=r.uniform(-2, 2, (f, cfg.height, cfg.width, 2)),
                          depth=r.random((f, cfg.height, cfg.width)), style=r.random((cfg.height, cfg.width, 3))),
             ConditionSet(text="a blue square moving up", sketch_seq=(r.random((f, cfg.height, cfg.width)) > 0.5) * 1.0)]
    return z0, collate(conds, f, cfg.search_range)


def _loss(model, z0, cb):
    return diffusion_loss(model, NoiseSchedule(), z0.astype(model._dtype), cb, 99)


def loss_probe(dtype: str, n_probe: int = 8, h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error of tape gradients against central differences.

    The tape gradients are computed at ``dtype``; the finite-difference oracle
    always runs on a 64-bit copy of the same parameters.
    """
    model = _model(dtype)
    oracle = _model("float64")
    oracle.load_state_dict(model.state_dict())
    z0, cb = _loss_inputs(model.config)
    params = dict(model.named_parameters())
    for p in params.values():
        p.requires_grad = True
    with Tape() as tape:
        backward(_loss(model, z0, cb), tape)
    r = np.random.default_rng(seed)
    names = sorted(params)
    oparams = dict(oracle.named_parameters())
    worst = 0.0
    for _ in range(n_probe):
        name = names[r.integers(len(names))]
        idx = tuple(int(r.integers(s)) for s in params[name].shape)
        arr = oparams[name].data
        old = arr[idx]
        arr[idx] = old + h
        fp = float(_loss(oracle, z0, cb).data)
        arr[idx] = old - h
        fm = float(_loss(oracle, z0, cb).data)
        arr[idx] = old
        num = (fp - fm) / (2 * h)
        ana = float(params[name].grad[idx])
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-7))
    return worst
