import math

import numpy as np
import pytest
import torch

from ctxseg.model import prepare_slide
from ctxseg.numerics import ShapeError, grad_check
from ctxseg.synthwsi import GeneratorParams, synthesize
from ctxseg.training import (
    AdamState,
    CheckpointFormatError,
    ConfigError,
    LabelError,
    TrainConfig,
    adam_step,
    ce_loss,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

f64 = torch.float64


class TestLoss:
    def test_uniform(self):
        loss = ce_loss(torch.zeros(4, 3, 3, dtype=f64), torch.zeros(3, 3, dtype=torch.long))
        assert float(loss) == pytest.approx(math.log(4), abs=1e-15)
        assert float(loss) == pytest.approx(1.3863, abs=1e-4)

    def test_large_margin(self):
        logits = torch.zeros(4, 2, 2, dtype=f64)
        logits[2] = 20.0
        loss = ce_loss(logits, torch.full((2, 2), 2))
        assert 0 <= float(loss) < 1e-8

    def test_single_pixel(self):
        loss = ce_loss(torch.tensor([0.0, math.log(3)], dtype=f64).reshape(2, 1, 1),
                       torch.ones(1, 1, dtype=torch.long))
        assert float(loss) == pytest.approx(-math.log(0.75), abs=1e-15)
        assert float(loss) == pytest.approx(0.2877, abs=1e-4)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ce_loss(torch.zeros(3, 2, 2), torch.full((2, 2), 3))

    def test_gradient_is_softmax_minus_onehot(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(2, 4, 3, 3, generator=gen, dtype=f64, requires_grad=True)
        target = torch.randint(0, 4, (2, 3, 3), generator=gen)
        (g,) = torch.autograd.grad(ce_loss(logits, target), logits)
        onehot = torch.nn.functional.one_hot(target, 4).permute(0, 3, 1, 2).to(f64)
        expected = (torch.softmax(logits, dim=1) - onehot) / target.numel()
        assert torch.allclose(g, expected.detach(), atol=1e-15)
        rep = grad_check(lambda p: ce_loss(p["z"], target), {"z": logits.detach()})
        assert rep.worst < 1e-6

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(1)
        for _ in range(20):
            logits = torch.randn(3, 4, 4, generator=gen, dtype=f64) * 5
            assert float(ce_loss(logits, torch.randint(0, 3, (4, 4), generator=gen))) >= 0


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = [torch.tensor([1.0, -2.0], dtype=f64)]
        state = AdamState()
        adam_step(p, [torch.zeros(2, dtype=f64)], state, 0.1)
        assert p[0].tolist() == [1.0, -2.0]
        assert not state.m[0].any() and not state.v[0].any()

    def test_first_step_matches_hand_formula(self):
        g = torch.tensor([0.5, -3.0, 1e-3], dtype=f64)
        p = [torch.zeros(3, dtype=f64)]
        adam_step(p, [g], AdamState(), 0.01)
        # m_hat = g, v_hat = g^2 after bias correction
        expected = -0.01 * g / (g.abs() + 1e-8)
        assert torch.allclose(p[0], expected, atol=1e-18)
        assert torch.allclose(p[0].abs(), torch.full((3,), 0.01, dtype=f64), rtol=1e-4)

    def test_deterministic(self):
        def run():
            p = [torch.tensor([1.0, 2.0], dtype=f64)]
            s = AdamState()
            for k in range(3):
                adam_step(p, [torch.tensor([0.1 * k, -0.2], dtype=f64)], s, 0.05)
            return p[0]
        assert torch.equal(run(), run())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([torch.zeros(2)], [torch.zeros(3)], AdamState(), 0.1)


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(gcn_layers=1, lr=3e-4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"heads": 3}, {"fusion": "sum"}, {"gcn_layers": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


@pytest.fixture(scope="module")
def tiny_dataset():
    return synthesize(5, 3, GeneratorParams(grid=8))


def small_cfg(**kw):
    base = dict(steps=6, batch_size=4, hidden=8, heads=2, fusion_layers=1, gcn_layers=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_byte_identical_checkpoints(self, tiny_dataset, tmp_path):
        a = train(small_cfg(), tiny_dataset)
        b = train(small_cfg(), tiny_dataset)
        pa = save_checkpoint(a.checkpoint, tmp_path / "a.ckpt")
        pb = save_checkpoint(b.checkpoint, tmp_path / "b.ckpt")
        assert pa.read_bytes() == pb.read_bytes()
        assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
        c = train(small_cfg(seed=6), tiny_dataset)
        assert save_checkpoint(c.checkpoint, tmp_path / "c.ckpt").read_bytes() != pa.read_bytes()

    @pytest.mark.parametrize("fusion", ["dcfusion", "cat", "dot", "none"])
    def test_depth_zero_and_all_fusions_train(self, tiny_dataset, fusion):
        res = train(small_cfg(gcn_layers=0, fusion=fusion), tiny_dataset)
        assert math.isfinite(res.checkpoint.final_loss)
        assert len(res.log) == 6

    def test_empty_split(self, tiny_dataset):
        with pytest.raises(ConfigError):
            train(small_cfg(), tiny_dataset, slides=[])

    def test_log_csv(self, tiny_dataset, tmp_path):
        res = train(small_cfg(steps=4, log_every=2), tiny_dataset)
        path = write_log(res.log, tmp_path / "log.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss,lr,elapsed_seconds"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["2", "4"]

    def test_overfit_one_slide(self):
        ds = synthesize(1, 11)
        slide = prepare_slide(ds.slides[ds.manifest.slide_ids[0]], "s", 32)
        res = train(TrainConfig(steps=1000, seed=0), ds, slides=[slide])
        losses = np.array([r["loss"] for r in res.log])
        assert losses[-50:].mean() < 0.05
        quarters = np.array_split(losses, 4)
        running = [q.min() for q in quarters]
        assert all(b < a for a, b in zip(running, running[1:]))


@pytest.fixture(scope="module")
def ckpt(tiny_dataset):
    return train(small_cfg(steps=2), tiny_dataset).checkpoint


class TestCheckpoint:
    def test_round_trip(self, ckpt, tmp_path):
        back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "m.ckpt"))
        assert back.config == ckpt.config
        assert TrainConfig.from_dict(back.config) == small_cfg(steps=2)
        assert back.step == 2 and back.final_loss == ckpt.final_loss
        assert set(back.tensors) == set(ckpt.tensors)
        for k, v in ckpt.tensors.items():
            assert back.tensors[k].tobytes() == v.tobytes()
        model = back.build_model()
        assert set(model.state_dict()) == set(ckpt.tensors)

    def test_bad_magic(self, ckpt, tmp_path):
        p = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(p)

    def test_version(self, ckpt, tmp_path):
        p = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        blob = bytearray(p.read_bytes())
        blob[4] = 9
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="version 9"):
            load_checkpoint(p)

    def test_truncated(self, ckpt, tmp_path):
        p = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(p)
