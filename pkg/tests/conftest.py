import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import sapnet as S


def seeded_image(shape, seed, lo=0.0, hi=1.0):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)


def rel_err(got, want):
    got = torch.as_tensor(got, dtype=torch.float64)
    want = torch.as_tensor(want, dtype=torch.float64)
    scale = want.abs().max().clamp_min(1e-12)
    return ((got - want).abs().max() / scale).item()


def fd_gradient(fn, x, eps=1e-6):
    """Central finite differences of scalar fn w.r.t. every element of x."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = eps * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def fd_param_gradients(fn, params, eps=1e-6):
    """Central finite differences of scalar fn() w.r.t. each tensor in params."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                step = eps * max(1.0, abs(orig))
                flat[i] = orig + step
                hi = fn()
                flat[i] = orig - step
                lo = fn()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads


def check_input_gradient(fn, x, tol=1e-3, eps=1e-6):
    """Autograd-vs-FD agreement for d fn(x) / d x; returns the relative error."""
    leaf = x.detach().clone().requires_grad_(True)
    fn(leaf).backward()
    auto = leaf.grad.detach().clone()
    fd = fd_gradient(lambda t: fn(t).item(), x, eps)
    err = rel_err(auto, fd)
    assert err < tol, f"input gradient mismatch: rel err {err:.3e}"
    return err


def check_param_gradients(fn, params, tol=1e-3, eps=1e-6):
    """Autograd-vs-FD agreement for d fn() / d params; returns worst error."""
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    fn().backward()
    autos = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]
    fds = fd_param_gradients(lambda: fn().item(), params, eps)
    worst = 0.0
    for p, auto, fd in zip(params, autos, fds):
        err = rel_err(auto, fd)
        assert err < tol, f"param gradient mismatch ({p.shape}): rel err {err:.3e}"
        worst = max(worst, err)
    return worst


# narrow extractor plan reused across tests: VGG-shaped but desk-sized
NARROW_WIDTHS = (8, 8, 16, 16, 32, 32, 32)


@pytest.fixture(scope="session")
def narrow_extractor():
    return S.build_feature_extractor("seeded_random", widths=NARROW_WIDTHS, seed=0)


@pytest.fixture(scope="session")
def small_segmenter():
    return S.build_segmenter(S.SegConfig(), seed=0)


def make_overfit_pairs(n=4, size=48, seed0=100):
    pairs = []
    g = torch.Generator().manual_seed(seed0)
    for i in range(n):
        base = F.interpolate(torch.rand(1, 3, 6, 6, generator=g), size=(size, size),
                             mode="bilinear", align_corners=False)[0]
        clean = base.clamp(0, 1)
        rainy = S.synth_rain(clean, streaks=70, angle_deg=-20.0, length_px=14.0,
                             intensity=0.9, seed=seed0 + i)
        pairs.append(S.PairedSample(rainy, clean, f"img{i}.png"))
    return pairs


OVERFIT_MODEL = S.ModelConfig(channels=8, dilations=(1, 2), stages=2, reduction=4)
OVERFIT_TRAIN = S.TrainConfig(epochs=200, batch_size=4, base_lr=1e-3, seed=0,
                              toggles=S.TrainToggles(use_decay=False))


def run_overfit(seed=0):
    """The canonical smoke run: 4 synthetic pairs, 200 full-loss steps."""
    pairs = make_overfit_pairs()
    tcfg = S.TrainConfig(epochs=200, batch_size=4, base_lr=1e-3, seed=seed,
                         toggles=S.TrainToggles(use_decay=False))
    seg = S.build_segmenter(S.SegConfig(), seed=0)
    fe = S.build_feature_extractor("seeded_random", widths=NARROW_WIDTHS, seed=0)
    t0 = time.perf_counter()
    result = S.train(pairs, OVERFIT_MODEL, tcfg, segmenter=seg, extractor=fe,
                     crop=None, lpisl_resize=64)
    return pairs, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def overfit_run():
    return run_overfit(seed=0)
