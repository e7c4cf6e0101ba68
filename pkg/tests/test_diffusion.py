import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from acmo.diffusion import (
    ConditionBundle,
    Denoiser,
    DenoiserConfig,
    DiffusionBatch,
    GuidanceConfig,
    NoiseSchedule,
    TextBatch,
    adm_loss,
    build_noise_schedule,
    cfg_combine,
    denoiser_forward,
    forward_diffuse,
    inference_steps,
    null_embedding,
    random_batch,
    sample,
    sample_latents,
    skip_partner,
    text_encode_stub,
    token_vector,
)
from acmo.errors import DataError, ShapeError
from acmo.numerics import check_module_gradient
from acmo.vae import MotionVAE, VAEConfig

D = torch.float64
TINY = DenoiserConfig(latent_tokens=2, latent_dim=8, width=16, layers=2, heads=2, K=50)
CAPS = ["a person walks forward", "a person jumps high", "a person waves"]


def tiny_model(seed=1, **kw):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(**{**TINY.__dict__, **kw})
    return Denoiser(cfg).double().eval()


def text_cond(texts=CAPS):
    return ConditionBundle(TextBatch.from_texts(texts, D))


# -- schedule / forward process --------------------------------------------------


def test_linear_schedule_first_step():
    s = build_noise_schedule(1000, "linear", 1e-4, 2e-2)
    assert s.K == 1000
    assert s.alpha_bar[0].item() == pytest.approx(1 - 1e-4, abs=1e-15)
    assert s.abar(1).item() == s.alpha_bar[0].item()


def test_single_step_schedule():
    s = build_noise_schedule(1, "linear", 0.3, 0.3)
    assert s.alpha_bar.tolist() == s.alpha.tolist() == [pytest.approx(0.7)]


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 400),
    st.sampled_from(["linear", "scaled_linear", "cosine"]),
    st.floats(1e-5, 1e-2),
    st.floats(1.0, 50.0),
)
def test_schedule_invariants(K, kind, b0, ratio):
    b1 = min(b0 * ratio, 0.5)
    s = build_noise_schedule(K, kind, b0, b1)
    ab = s.alpha_bar
    assert (ab > 0).all() and (ab < 1).all()
    assert (ab.diff() < 0).all()


@pytest.mark.parametrize("args", [(0, "linear", 1e-4, 2e-2), (10, "linear", 0.0, 0.1), (10, "linear", 0.2, 0.1), (10, "wavy", 1e-4, 2e-2)])
def test_schedule_errors(args):
    with pytest.raises(DataError):
        build_noise_schedule(*args)


def _fixed(abar):
    a = torch.tensor([abar], dtype=D)
    return NoiseSchedule(a, a)


def test_forward_diffuse_examples():
    z0, eps = torch.tensor([2.0], dtype=D), torch.tensor([1.0], dtype=D)
    assert forward_diffuse(z0, 1, eps, _fixed(1.0)).item() == 2.0
    assert forward_diffuse(z0, 1, eps, _fixed(0.0)).item() == 1.0
    assert forward_diffuse(z0, 1, eps, _fixed(0.25)).item() == pytest.approx(0.5 * 2 + math.sqrt(0.75), abs=1e-15)
    assert forward_diffuse(z0, 1, eps, _fixed(0.25)).item() == pytest.approx(1.8660, abs=1e-4)


def test_forward_diffuse_errors():
    s = build_noise_schedule(10)
    with pytest.raises(DataError):
        forward_diffuse(torch.zeros(2), 11, torch.zeros(2), s)
    with pytest.raises(DataError):
        forward_diffuse(torch.zeros(2), 0, torch.zeros(2), s)
    with pytest.raises(ShapeError):
        forward_diffuse(torch.zeros(2), 1, torch.zeros(3), s)


@pytest.mark.parametrize("k", [1, 300, 1000])
def test_forward_diffuse_moments(k):
    s = build_noise_schedule(1000)
    g = torch.Generator().manual_seed(k)
    z0 = torch.full((10_000,), 1.5, dtype=D)
    zk = forward_diffuse(z0, k, torch.randn(10_000, generator=g, dtype=D), s)
    ab = s.abar(k).item()
    assert abs(zk.mean().item() - math.sqrt(ab) * 1.5) < 0.05 * max(1.0, math.sqrt(ab) * 1.5)
    assert abs(zk.var().item() / (1 - ab) - 1) < 0.05


# -- text stub --------------------------------------------------------------------


def test_text_stub_determinism_and_null():
    a, b = text_encode_stub("A person walks"), text_encode_stub("a person  walks")
    assert np.array_equal(a.features, b.features) and np.array_equal(a.mask, b.mask)
    null = text_encode_stub("")
    ref = null_embedding()
    assert null.is_null and np.array_equal(null.features, ref.features)
    assert not a.is_null
    assert a.mask.sum() == 3


def test_token_vectors_unique_and_unit():
    vecs = np.stack([token_vector(f"tok{i}") for i in range(10_000)])
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0)
    assert len({v.tobytes() for v in vecs}) == 10_000


# -- guidance ---------------------------------------------------------------------


def test_cfg_examples():
    a, b = torch.tensor([1.0], dtype=D), torch.tensor([0.0], dtype=D)
    assert cfg_combine(a, b, 6.5).item() == 6.5
    x, y = torch.randn(5, dtype=D), torch.randn(5, dtype=D)
    assert torch.equal(cfg_combine(x, y, 1.0), x)
    assert torch.equal(cfg_combine(x, y, 0.0), y)
    with pytest.raises(ShapeError):
        cfg_combine(x, y[:3], 2.0)


def test_guidance_config_validation():
    for kw in ({"w": -1.0}, {"uncond_prob": 1.5}, {"sampler": "euler"}, {"steps": 0}):
        with pytest.raises(DataError):
            GuidanceConfig(**kw)


# -- denoiser ---------------------------------------------------------------------


def test_default_denoiser_shape():
    torch.manual_seed(0)
    net = Denoiser()
    z = torch.randn(1, 7, 256)
    with torch.no_grad():
        out = net(z, torch.tensor([500]), ConditionBundle(TextBatch.from_texts(["a person walks"])))
    assert out.shape == (1, 7, 256)


def test_null_condition_deterministic():
    net = tiny_model()
    z = torch.randn(2, 2, 8, dtype=D)
    k = torch.tensor([3, 40])
    with torch.no_grad():
        assert torch.equal(net(z, k, ConditionBundle()), net(z, k, ConditionBundle()))
        # an explicit null text batch is the same branch as no text
        assert torch.equal(net(z, k, ConditionBundle()), net(z, k, ConditionBundle(TextBatch.null(2, D))))


def test_denoiser_rejects_bad_inputs():
    net = tiny_model()
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 3, 8, dtype=D), torch.tensor([1]))
    with pytest.raises(DataError):
        net(torch.zeros(1, 2, 8, dtype=D), torch.tensor([51]))
    with pytest.raises(DataError):
        DenoiserConfig(wiring="ring")
    with pytest.raises(DataError):
        denoiser_forward(torch.zeros(1, 2, 8, dtype=D), torch.tensor([1]), ConditionBundle(), net, wiring="ring")


def test_text_changes_output():
    net = tiny_model()
    z = torch.randn(1, 2, 8, dtype=D)
    with torch.no_grad():
        a = net(z, torch.tensor([10]), text_cond(CAPS[:1]))
        b = net(z, torch.tensor([10]), text_cond(CAPS[1:2]))
    assert not torch.allclose(a, b)


def test_block_and_stack_agree_without_cross_attention():
    net = tiny_model()
    with torch.no_grad():
        for blk in net.blocks:
            blk.cross_attn.o.weight.zero_()
            blk.cross_attn.o.bias.zero_()
    z = torch.randn(3, 2, 8, dtype=D)
    k = torch.tensor([1, 20, 50])
    with torch.no_grad():
        a = denoiser_forward(z, k, text_cond(), net, wiring="block")
        b = denoiser_forward(z, k, text_cond(), net, wiring="stack")
    assert torch.allclose(a, b, atol=1e-14)
    assert net.cfg.wiring == "block"


def test_text_query_orientation_preserves_shape():
    net = tiny_model(orientation="text_query")
    z = torch.randn(3, 2, 8, dtype=D)
    with torch.no_grad():
        assert net(z, torch.tensor([5, 6, 7]), text_cond()).shape == z.shape


@pytest.mark.parametrize("n", range(1, 12))
def test_skip_pairing_is_involution(n):
    for i in range(n):
        assert skip_partner(skip_partner(i, n), n) == i


def test_paper_scale_preset():
    cfg = DenoiserConfig.paper_scale()
    assert (cfg.layers, cfg.heads) == (11, 4)


# -- loss ---------------------------------------------------------------------------


def _batch(B=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return random_batch(torch.randn(B, 2, 8, generator=g, dtype=D), build_noise_schedule(50), g)


def test_adm_loss_zero_for_perfect_predictor():
    b = _batch()
    sched = build_noise_schedule(50)
    loss = adm_loss(b, text_cond(), None, sched, GuidanceConfig(uncond_prob=0.0), predict=lambda z, k, c: b.eps)
    assert loss.item() == 0.0


def test_adm_loss_two_sample_oracle():
    sched = build_noise_schedule(50)
    z0 = torch.tensor([[[1.0, 0.0]], [[0.0, 2.0]]], dtype=D)
    eps = torch.tensor([[[0.5, -1.0]], [[1.0, 1.0]]], dtype=D)
    b = DiffusionBatch(z0, torch.tensor([1, 2]), eps)
    # predictor returns zeros, so the loss is the mean of squared noise norms
    loss = adm_loss(b, ConditionBundle(), None, sched, GuidanceConfig(uncond_prob=0.0), predict=lambda z, k, c: torch.zeros_like(z))
    assert loss.item() == pytest.approx(((0.25 + 1.0) + (1.0 + 1.0)) / 2, abs=1e-15)


def test_adm_loss_full_dropout_equals_null_condition():
    net = tiny_model()
    sched = net.schedule()
    b = _batch()
    g = GuidanceConfig(uncond_prob=1.0)
    dropped = adm_loss(b, text_cond(), net, sched, g)
    null = adm_loss(b, ConditionBundle(), net, sched, GuidanceConfig(uncond_prob=0.0))
    assert torch.equal(dropped, null)


def test_adm_loss_dropout_is_seeded():
    net = tiny_model()
    sched = net.schedule()
    b = _batch(B=8)
    g = GuidanceConfig(uncond_prob=0.5)
    la = adm_loss(b, text_cond((CAPS * 3)[:8]), net, sched, g, torch.Generator().manual_seed(4))
    lb = adm_loss(b, text_cond((CAPS * 3)[:8]), net, sched, g, torch.Generator().manual_seed(4))
    assert torch.equal(la, lb)


def test_adm_loss_gradient_check():
    net = tiny_model()
    net.train()
    sched = net.schedule()
    b = _batch()
    cond = text_cond()
    g = GuidanceConfig(uncond_prob=0.0)

    def loss():
        return adm_loss(b, cond, net, sched, g)

    params = dict(net.named_parameters())
    # key biases only shift every logit of a query equally, so their exact gradient is zero
    key_bias = {n: p for n, p in params.items() if n.endswith(".k.bias")}
    grads = torch.autograd.grad(loss(), list(key_bias.values()))
    assert max(gr.abs().max().item() for gr in grads) < 1e-12
    rest = {n: p for n, p in params.items() if n not in key_bias}
    assert check_module_gradient(loss, rest, per_tensor=3, floor=1e-6) < 1e-4


# -- sampling -----------------------------------------------------------------------


def test_inference_steps():
    assert inference_steps(1000, 50)[:3] == [1000, 980, 960]
    assert len(inference_steps(1000, 50)) == 50
    assert inference_steps(10, 50) == list(range(10, 0, -1))


def _spy_predict(net, log):
    def predict(z, k, c):
        log.append(c.text is None)
        return net(z, k, c)

    return predict


def test_unit_guidance_equals_conditioned_only_run():
    net = tiny_model()
    sched = net.schedule()
    g = GuidanceConfig(w=1.0, steps=10)
    calls = []
    a = sample_latents(_spy_predict(net, calls), text_cond(), ConditionBundle(), 3, (2, 8), sched, g, [1, 2, 3], D)
    assert not any(calls)  # the null branch is never evaluated
    other = text_cond(["x", "y", "z"])
    b = sample_latents(net, text_cond(), other, 3, (2, 8), sched, g, [1, 2, 3], D)
    assert torch.equal(a, b)


@pytest.mark.parametrize("sampler", ["ddim", "ancestral"])
def test_sampling_deterministic(sampler):
    torch.manual_seed(2)
    vae = MotionVAE(VAEConfig(latent_tokens=2, latent_dim=8, width=16, heads=2, max_len=32)).double().eval()
    net = tiny_model()
    g = GuidanceConfig(w=7.5, steps=8, sampler=sampler)
    a = sample(CAPS[:2], 12, g, net, vae, net.schedule(), seed=5)
    b = sample(CAPS[:2], 12, g, net, vae, net.schedule(), seed=5)
    c = sample(CAPS[:2], 12, g, net, vae, net.schedule(), seed=6)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])
    assert a[0].shape == (12, 263)


def test_sample_errors():
    net = tiny_model()
    g = GuidanceConfig(steps=2)
    with pytest.raises(DataError):
        sample("a", 10, g, net, None, net.schedule())
    vae = MotionVAE(VAEConfig(latent_tokens=2, latent_dim=8, width=16, heads=2, max_len=32)).double()
    with pytest.raises(DataError):
        sample("a", 40, g, net, vae, net.schedule())
    with pytest.raises(DataError):
        sample_latents(net, text_cond(), ConditionBundle(), 3, (2, 8), net.schedule(), g, [1], D)
