import pytest
import torch
from torch import nn

from ctxseg.codec import Decoder, Encoder
from ctxseg.fusion import (
    ConfigError,
    Fusion,
    MSABlock,
    assemble_sequence,
    dcfusion_forward,
    fuse_variant,
    msa_block,
    select_detail_tokens,
)
from ctxseg.numerics import ShapeError, grad_check, layer_norm, precision
from ctxseg.training import ce_loss

f64 = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64)


def blocks(n, hidden=8, heads=2, mlp=False, seed=0):
    with precision("float64"):
        bs = [MSABlock(hidden, heads, mlp) for _ in range(n)]
    gen = torch.Generator().manual_seed(seed)
    for b in bs:
        b.reset_parameters(gen)
        with torch.no_grad():
            # generic (non-identity) layer norm parameters
            b.ln_gamma.add_(torch.rand(hidden, generator=gen, dtype=f64) * 0.5)
            b.ln_beta.add_(torch.rand(hidden, generator=gen, dtype=f64) * 0.1)
    return bs


class TestAssemble:
    def test_shape(self):
        z = assemble_sequence(rand(1, 32), rand(1, 16, 32), torch.zeros(32, dtype=f64),
                              torch.zeros(16, 32, dtype=f64))
        assert z.shape == (1, 17, 32)

    def test_zero_embeddings_is_exact(self):
        zc, zd = rand(1, 4, seed=1), rand(1, 3, 4, seed=2)
        z = assemble_sequence(zc, zd, torch.zeros(4, dtype=f64), torch.zeros(3, 4, dtype=f64))
        assert torch.equal(z[0, 0], zc[0]) and torch.equal(z[0, 1:], zd[0])

    def test_context_only_touches_row_zero(self):
        zd = rand(1, 3, 4)
        e, p = rand(4, seed=3), rand(3, 4, seed=4)
        a = assemble_sequence(rand(1, 4, seed=5), zd, e, p)
        b = assemble_sequence(rand(1, 4, seed=6), zd, e, p)
        assert not torch.equal(a[0, 0], b[0, 0])
        assert torch.equal(a[0, 1:], b[0, 1:])

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            assemble_sequence(rand(1, 5), rand(1, 3, 4), torch.zeros(4, dtype=f64), torch.zeros(3, 4, dtype=f64))


class TestSelect:
    def test_drops_context_row(self):
        z = rand(2, 17, 32)
        out = select_detail_tokens(z, 16)
        assert out.shape == (2, 16, 32)
        assert torch.equal(out[:, 3], z[:, 4])

    def test_inverse_of_assemble(self):
        zd = rand(1, 16, 8)
        z = assemble_sequence(rand(1, 8), zd, torch.zeros(8, dtype=f64), torch.zeros(16, 8, dtype=f64))
        assert torch.equal(select_detail_tokens(z), zd)

    def test_wrong_rows(self):
        with pytest.raises(ShapeError):
            select_detail_tokens(rand(1, 16, 8), 16)


class TestMSA:
    def test_zero_out_projection_is_residual(self):
        (b,) = blocks(1)
        with torch.no_grad():
            b.out.weight.zero_()
            b.out.bias.zero_()
        z = rand(1, 5, 8)
        assert torch.equal(msa_block(z, b), z)

    def test_single_token(self):
        (b,) = blocks(1)
        z = rand(1, 1, 8)
        v = b.qkv(layer_norm(z, b.ln_gamma, b.ln_beta))[..., 16:]
        assert torch.allclose(msa_block(z, b), z + b.out(v), atol=1e-14)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            MSABlock(10, 4)

    @pytest.mark.parametrize("mlp", [False, True])
    def test_gradcheck(self, mlp):
        (b,) = blocks(1, mlp=mlp)
        z = rand(1, 5, 8, seed=7)
        params = dict(b.named_parameters())
        params["z"] = z

        def loss(p):
            inner = {k: v for k, v in p.items() if k != "z"}
            out = torch.func.functional_call(b, inner, (p["z"],))
            return (out ** 2).mean() + out[0, 0].mean()

        assert grad_check(loss, params).worst < 1e-5


class TestDCFusion:
    def test_one_layer_is_one_block(self):
        bs = blocks(1)
        z = rand(2, 17, 8)
        assert torch.equal(dcfusion_forward(z, bs), msa_block(z, bs[0]))

    @pytest.mark.parametrize("layers", [1, 2, 3])
    def test_shape(self, layers):
        bs = blocks(layers)
        assert dcfusion_forward(rand(1, 17, 8), bs).shape == (1, 17, 8)

    def test_context_reaches_detail_tokens(self):
        bs = blocks(2)
        z = rand(1, 17, 8)
        z2 = z.clone()
        z2[0, 0] += rand(8, seed=9)
        diff = (dcfusion_forward(z, bs)[0, 1:] - dcfusion_forward(z2, bs)[0, 1:]).abs().max().detach()
        assert float(diff) > 1e-6

    def test_zero_layers(self):
        with pytest.raises(ConfigError):
            dcfusion_forward(rand(1, 17, 8), [])

    def test_detail_permutation_equivariance(self):
        gen = torch.Generator().manual_seed(10)
        for trial in range(50):
            bs = blocks(2, seed=trial)
            z = rand(1, 17, 8, seed=100 + trial)
            perm = torch.randperm(16, generator=gen) + 1
            order = torch.cat([torch.tensor([0]), perm])
            out = dcfusion_forward(z, bs)
            out_p = dcfusion_forward(z[:, order], bs)
            assert float((out_p - out[:, order]).abs().max().detach()) < 1e-10

    def test_zero_context_ignores_context_parameters(self):
        from ctxseg.model import ContextSegNet

        with precision("float64"):
            net = ContextSegNet(patch=32, hidden=8, heads=2, gcn_layers=0)
        net.reset_parameters(0)
        with torch.no_grad():
            net.fusion.e_ctx.zero_()
            net.fusion.e_pos.zero_()
        tiles = torch.rand(3, 3, 32, 32, generator=torch.Generator().manual_seed(1), dtype=f64)
        A = torch.eye(3, dtype=f64)
        mask = torch.eye(3, dtype=torch.bool)
        targets = torch.tensor([0, 2])
        zero_ctx = torch.zeros(3, 8, dtype=f64)
        base = net(tiles, A, mask, targets, zero_ctx)
        with torch.no_grad():
            for p in net.featurizer.parameters():
                p.add_(1.0)
        assert torch.equal(net(tiles, A, mask, targets, zero_ctx), base)
        # and the zero context still differs from a real one
        assert not torch.equal(net(tiles, A, mask, targets), base)


class TestVariants:
    def test_none(self):
        zd = rand(1, 16, 8)
        assert fuse_variant("none", rand(1, 8), zd) is zd

    def test_dot_with_ones(self):
        zd = rand(1, 16, 8)
        assert torch.equal(fuse_variant("dot", torch.ones(1, 8, dtype=f64), zd), zd)

    def test_cat_zero_map(self):
        lin = nn.Linear(16, 8, dtype=f64)
        nn.init.zeros_(lin.weight)
        nn.init.zeros_(lin.bias)
        assert not fuse_variant("cat", rand(1, 8), rand(1, 16, 8), lin).any()

    def test_unknown(self):
        with pytest.raises(ConfigError):
            fuse_variant("sum", rand(1, 8), rand(1, 16, 8))
        with pytest.raises(ConfigError):
            Fusion(8, 16, "sum")

    @pytest.mark.parametrize("strategy", ["dcfusion", "cat", "dot", "none"])
    def test_shape_preserved(self, strategy):
        with precision("float64"):
            f = Fusion(8, 16, strategy, heads=2)
        f.reset_parameters(torch.Generator().manual_seed(0))
        assert f(rand(3, 8), rand(3, 16, 8)).shape == (3, 16, 8)


def test_pipeline_gradcheck():
    hidden, k = 4, 3
    with precision("float64"):
        enc, dec, fus = Encoder(hidden), Decoder(hidden, k), Fusion(hidden, 1, "dcfusion", 1, 2, mlp=True)
    gen = torch.Generator().manual_seed(11)
    for m in (enc, dec, fus):
        m.reset_parameters(gen)
        with torch.no_grad():
            for n, p in m.named_parameters():
                if n.endswith("bias"):
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=f64) * 0.2 + 0.05)
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=f64) * 2 - 1
    target = torch.randint(0, k, (2, 8, 8), generator=gen)
    modules = {"enc": enc, "dec": dec, "fus": fus}
    params = {f"{m}.{n}": p for m, mod in modules.items() for n, p in mod.named_parameters()}
    params["z_c"] = rand(2, hidden, seed=12)

    def sub(p, prefix):
        return {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith(prefix + ".")}

    def loss(p):
        z_d, skips = torch.func.functional_call(enc, sub(p, "enc"), (x,))
        fused = torch.func.functional_call(fus, sub(p, "fus"), (p["z_c"], z_d))
        logits = torch.func.functional_call(dec, sub(p, "dec"), (fused, skips))
        return ce_loss(logits, target)

    rep = grad_check(loss, params)
    assert rep.worst < 1e-5
