import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitgan_lab import attention as A
from vitgan_lab import models as M
from vitgan_lab import tensor as T
from vitgan_lab.rng import Rng
from vitgan_lab.tensor import Tape, Tensor
from vitgan_lab.training import Adam

TOY_G = dict(blocks=2, width=64, heads=4, patch=2, image_size=8, channels=1, latent_dim=64)
TOY_D = dict(blocks=2, width=64, heads=4, patch=2, image_size=8, channels=1)


def _gen(**kw):
    return M.Generator(M.GeneratorConfig(**dict(TOY_G, **kw)), Rng(0, "g"))


def _disc(**kw):
    return M.Discriminator(M.DiscriminatorConfig(**dict(TOY_D, **kw)), Rng(0, "d"))


def test_config_defaults():
    g, d = M.GeneratorConfig(), M.DiscriminatorConfig()
    assert (g.variant, g.output_map) == ("C", "inr")
    assert (d.kernel, d.spectral, d.overlap) == ("l2_tied", "isn", None)
    assert _disc().grid.overlap == 1
    with pytest.raises(ValueError):
        M.GeneratorConfig(variant="D")


@pytest.mark.parametrize("variant", ["A", "B", "C"])
@pytest.mark.parametrize("output_map", ["linear", "inr"])
def test_generator_shape_and_range(variant, output_map):
    gen = _gen(variant=variant, output_map=output_map)
    z = Rng(1, "z").normal((3, 64)).astype(np.float32)
    x = gen(z).data
    assert x.shape == (3, 8, 8, 1)
    assert np.all(np.isfinite(x)) and np.all(np.abs(x) <= 1)


def test_generator_batch_independence(f64):
    gen = _gen(variant="A")
    z = Rng(2, "z").normal((2, 64))
    both = gen(z).data
    assert np.allclose(both[0], gen(z[:1]).data[0], atol=1e-6)
    assert np.allclose(both[1], gen(z[1:]).data[0], atol=1e-6)


def test_sln_neutral_at_init_then_breaks(f64):
    gen = _gen(variant="C")
    z = Rng(3, "z").normal((2, 64))
    x = gen(z).data
    assert np.allclose(x[0], x[1], atol=1e-12)
    # one optimizer step on the modulation maps makes the latent matter
    params = {n: p for n, p in gen.parameters().items() if "gamma_map" in n or "beta_map" in n}
    target = Rng(4, "t").normal((2, 8, 8, 1))
    with Tape() as tape:
        loss = T.reduce_sum(T.square(gen(z) - target))
        grads = tape.backward(loss, wrt=list(params.values()))
    grads = {n: grads[p] for n, p in params.items()}
    assert any(np.any(g != 0) for g in grads.values())
    Adam(params, lr=0.01).step(params, grads)
    y = gen(z).data
    assert not np.allclose(y[0], y[1])


def test_sln_at_init_equals_layernorm(f64):
    p = M.SelfModulatedLN(8, Rng(0))
    h = Rng(1).normal((2, 3, 8))
    w = Rng(2).normal((2, 8))
    want = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
    assert np.allclose(M.sln(h, w, p).data, want, atol=1e-12)


@given(st.integers(0, 1000))
def test_generator_never_leaves_range(seed):
    gen = _gen(variant="C")
    z = 10 * Rng(seed, "z").normal((2, 64)).astype(np.float32)
    x = gen(z).data
    assert np.all(np.isfinite(x)) and np.all(np.abs(x) <= 1)


def test_inr_decoder_examples(f64):
    dec = M.InrDecoder(16, 2, 1, Rng(0))
    y = Rng(1).normal((3, 16))
    out = M.inr_decode(dec, y).data
    assert out.shape == (3, 4, 1) and np.all(np.abs(out) < 1)
    dec.out.weight.data[:] = 0
    dec.out.bias.data[:] = 0
    assert np.all(M.inr_decode(dec, y).data == 0)

    dec = M.InrDecoder(16, 2, 1, Rng(0), demodulate=False)
    dec.style.weight.data[:] = 0
    dec.style.bias.data[:] = 1.0
    out = dec(Rng(5).normal((2, 16))).data
    assert np.array_equal(out[0], out[1])


def test_discriminator_shape_and_permutation(f64):
    d = _disc()
    x = Rng(0).uniform(-1, 1, (5, 8, 8, 1))
    logits = d(x).data
    assert logits.shape == (5,)
    perm = [4, 2, 0, 1, 3]
    assert np.allclose(d(x[perm]).data, logits[perm], atol=1e-12)


def test_discriminator_zero_head(f64):
    d = _disc()
    d.head.weight.data[:] = 0
    d.head.spectral = None
    d.head.bias.data[:] = 0.25
    assert np.allclose(d(Rng(0).uniform(-1, 1, (3, 8, 8, 1))).data, 0.25)


def test_discriminator_wraps_every_projection():
    d = _disc()
    names = {n for n, _ in d.named_spectral()}
    assert "embed.spectral" in names and "head.spectral" in names
    assert any(n.endswith("attn.w_out.spectral") for n in names)
    assert any(n.endswith("mlp.fc2.spectral") for n in names)


def test_class_token_isolation(f64):
    # with zero attention output projections the logit sees only the class token
    d = _disc(blocks=1)
    blk = d.blocks[0]
    blk.attn.w_out.spectral = None
    blk.attn.w_out.weight.data[:] = 0
    blk.attn.w_out.bias.data[:] = 0
    a = Rng(0).uniform(-1, 1, (2, 8, 8, 1))
    assert np.allclose(d(a).data, d(np.zeros_like(a)).data, atol=1e-12)


def test_block_identity_and_gradcheck(f64):
    blk = M.TransformerBlock(8, 2, Rng(0))
    h = Rng(1).normal((2, 5, 8))
    assert blk(h).shape == (2, 5, 8)
    blk.attn.w_out.weight.data[:] = 0
    blk.attn.w_out.bias.data[:] = 0
    blk.mlp.fc2.weight.data[:] = 0
    blk.mlp.fc2.bias.data[:] = 0
    assert np.array_equal(blk(h).data, h)
    blk = M.TransformerBlock(8, 2, Rng(2), kernel="l2_tied")
    assert T.gradcheck(lambda t: T.reduce_sum(T.square(blk(t))), Tensor(Rng(3).normal((1, 3, 8)))).passed


def test_block_requires_w_when_modulated():
    blk = M.TransformerBlock(8, 2, Rng(0), norm="sln")
    with pytest.raises(ValueError):
        blk(np.zeros((1, 3, 8), np.float32))


def test_disc_lipschitz_sanity_l2_isn(f64):
    # the bounded half of the discriminator sanity property
    for seed in range(3):
        d = M.Discriminator(M.DiscriminatorConfig(**dict(TOY_D, blocks=1, width=32)), Rng(seed, "d"))
        x = Rng(seed, "x").uniform(-1, 1, (1, 8, 8, 1))
        lo, hi = (A.empirical_lipschitz(d, s * x, iters=100, rng=Rng(seed, "v")) for s in (1.0, 10.0))
        assert hi / lo <= 3


@pytest.mark.xfail(strict=True, reason="pre-norm layernorms make the full discriminator scale-invariant; "
                                       "see decisions ledger")
def test_disc_lipschitz_sanity_dot_product_grows(f64):
    grew = []
    for seed in range(3):
        d = M.Discriminator(M.DiscriminatorConfig(**dict(TOY_D, blocks=1, width=32, spectral="none",
                                                         kernel="dot_product")), Rng(seed, "d"))
        x = Rng(seed, "x").uniform(-1, 1, (1, 8, 8, 1))
        lo, hi = (A.empirical_lipschitz(d, s * x, iters=100, rng=Rng(seed, "v")) for s in (1.0, 10.0))
        grew.append(hi / lo)
    assert all(g >= 10 for g in grew), grew


def test_state_dict_roundtrip():
    d = _disc()
    sd = d.state_dict()
    d2 = M.Discriminator(M.DiscriminatorConfig(**TOY_D), Rng(9, "d"))
    d2.load_state_dict(sd)
    x = Rng(0).uniform(-1, 1, (2, 8, 8, 1)).astype(np.float32)
    assert np.array_equal(d(x).data, d2(x).data)
    with pytest.raises(KeyError):
        d2.load_state_dict({k: v for k, v in sd.items() if k != "cls"})


def test_config_to_dict_roundtrip():
    cfg = M.GeneratorConfig(**TOY_G)
    assert M.GeneratorConfig(**cfg.to_dict()) == cfg
    dcfg = dataclasses.replace(M.DiscriminatorConfig(**TOY_D), overlap=0)
    assert M.DiscriminatorConfig(**dcfg.to_dict()) == dcfg
