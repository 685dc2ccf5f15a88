import math

import numpy as np
import pytest
import torch
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from mvjar.gradcheck import TINY_MODEL, tiny_problem
from mvjar.mask_sampler import build_mask_plan
from mvjar.nn_core import (
    MVJARModel,
    ModelConfig,
    ShapeMismatchError,
    adamw_step,
    build_optimizer,
    chamfer_l2,
    cosine_lr,
    frame_losses,
    gradcheck,
    joint_loss,
    load_checkpoint,
    mvj_loss,
    mvr_loss,
    save_checkpoint,
)
from mvjar.pointcloud_io import SynthConfig, generate_synthetic_frame
from mvjar.task_targets import WindowConfig, assemble_masked_batch
from mvjar.voxel_grid import GridConfig, voxelize
from tests.oracles import chamfer_oracle

GRID = GridConfig((0, 0, -2), (2.56, 2.56, 4), (0.32, 0.32, 6), max_points=8)
WIN = WindowConfig(4, 4, 1)
CFG = ModelConfig(num_classes=16, point_hidden=16, dim=16, num_blocks=2, num_heads=4,
                  head_hidden=16, num_recon_points=5)


def make_batch(seed=0, rp=0.2, rs=0.2, strategy="random"):
    frame = generate_synthetic_frame(SynthConfig(
        x_range=(0, 2.56), y_range=(0, 2.56), ground_points=150, num_boxes=1,
        box_size_min=(0.3, 0.3, 0.3), box_size_max=(0.8, 0.8, 1.0), points_per_box=80, seed=seed))
    vf = voxelize(frame, GRID)
    return assemble_masked_batch(vf, build_mask_plan(vf, strategy, rp, rs, seed), WIN)


class TestLosses:
    def test_uniform_logits(self):
        loss = mvj_loss(torch.zeros(5, 144), np.arange(5))
        assert loss.value.item() == pytest.approx(math.log(144), abs=1e-12)
        assert loss.count == 5

    def test_margin(self):
        # the loss at margin m is log(1 + (C-1) e^-m), below 1e-8 at m=20 only for C <= 5
        logits = torch.zeros(2, 4, dtype=torch.float64)
        logits[0, 3] = logits[1, 1] = 20.0
        assert mvj_loss(logits, [3, 1]).value.item() < 1e-8
        losses = []
        for margin in (1.0, 5.0, 20.0, 40.0):
            big = torch.zeros(1, 144, dtype=torch.float64)
            big[0, 7] = margin
            losses.append(mvj_loss(big, [7]).value.item())
        assert losses == sorted(losses, reverse=True)
        assert losses[-1] == pytest.approx(143 * math.exp(-40), rel=1e-6)

    def test_hand_computed_ce(self):
        logits = [[1.0, 2.0, 0.5], [0.0, 0.0, 3.0], [-1.0, 1.0, 1.0]]
        labels = [1, 0, 2]
        expected = 0.0
        for row, y in zip(logits, labels):
            z = sum(math.exp(v) for v in row)
            expected += -math.log(math.exp(row[y]) / z)
        expected /= 3
        assert mvj_loss(torch.tensor(logits, dtype=torch.float64), labels).value.item() == pytest.approx(
            expected, abs=1e-12)

    def test_softmax_rows(self):
        logits = torch.randn(6, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        p = torch.softmax(logits, dim=-1)
        assert torch.allclose(p.sum(-1), torch.ones(6, dtype=torch.float64), atol=1e-12)
        ce = mvj_loss(logits[:1], [4]).value.item()
        assert ce == pytest.approx(-math.log(p[0, 4].item()), abs=1e-12)

    def test_empty_jigsaw(self):
        loss = mvj_loss(torch.zeros(0, 16), np.zeros(0, dtype=np.int64))
        assert loss.count == 0 and loss.value.item() == 0.0

    def test_chamfer_analytic(self):
        a = np.random.default_rng(0).normal(size=(7, 3))
        assert chamfer_l2(a, a).item() == 0.0
        assert chamfer_l2([[0, 0, 0]], [[1, 0, 0]]).item() == 2.0
        assert chamfer_l2([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]).item() == 0.5

    def test_chamfer_empty(self):
        with pytest.raises(ValueError):
            chamfer_l2(np.zeros((0, 3)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
    def test_chamfer_oracle_and_duplicates(self, n, t, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.uniform(-1, 1, (n, 3)), rng.uniform(-1, 1, (t, 3))
        value = chamfer_l2(p, q).item()
        assert value == pytest.approx(chamfer_oracle(p.tolist(), q.tolist()), abs=1e-12)
        assert chamfer_l2(p, np.vstack([q, q])).item() == pytest.approx(value, abs=1e-12)

    def test_mvr_mean_of_voxels(self):
        recon = torch.tensor([[[0.0, 0, 0]], [[0.0, 0, 0]]], dtype=torch.float64)
        targets = [np.array([[1.0, 0, 0]]), np.array([[0.0, 0, 0]])]
        assert mvr_loss(recon, targets).value.item() == pytest.approx((2.0 + 0.0) / 2)

    def test_mvr_padded_matches_list(self):
        rng = np.random.default_rng(3)
        recon = torch.as_tensor(rng.uniform(-1, 1, (3, 5, 3)))
        tmask = np.zeros((3, 6), dtype=bool)
        tmask[0, :2] = tmask[1, :6] = tmask[2, :1] = True
        targets = rng.uniform(-1, 1, (3, 6, 3)) * tmask[..., None]
        padded = mvr_loss(recon, targets, tmask).value.item()
        listed = mvr_loss(recon, [t[m] for t, m in zip(targets, tmask)]).value.item()
        assert padded == pytest.approx(listed, abs=1e-12)

    def test_mvr_identity_and_empty(self):
        t = np.random.default_rng(1).uniform(-1, 1, (4, 3))
        assert mvr_loss(torch.as_tensor(t)[None], [t]).value.item() == 0.0
        assert mvr_loss(torch.zeros(0, 5, 3), []).count == 0

    def test_joint(self):
        assert joint_loss(2.0, 0.5) == 2.5
        assert joint_loss(2.0, 0.5, 1.0, 0.0) == 2.0
        with pytest.raises(ValueError):
            joint_loss(1.0, 1.0, -1.0)


class TestModel:
    def test_zero_masked_gives_empty_outputs(self):
        b = make_batch(rp=0.0, rs=0.0)
        out = MVJARModel(CFG)(b)
        assert out.logits.shape == (0, 16) and out.recon.shape == (0, 5, 3)
        fl = frame_losses(out, b)
        assert fl.total.item() == 0.0 and fl.mvj.count == 0 and fl.mvr.count == 0

    def test_output_shapes_and_range(self):
        b = make_batch()
        out = MVJARModel(CFG)(b)
        assert out.logits.shape == (len(b.jigsaw), 16)
        assert out.recon.shape == (len(b.shape), 5, 3)
        assert out.recon.abs().max() <= 1.0

    def test_deterministic(self):
        b = make_batch(seed=2)
        a = MVJARModel(CFG, seed=4)(b)
        c = MVJARModel(CFG, seed=4)(b)
        assert torch.equal(a.logits, c.logits) and torch.equal(a.recon, c.recon)

    def test_window_count_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="classes"):
            MVJARModel(replace(CFG, num_classes=144))(make_batch())

    def test_singleton_window_reduces_to_ffn_path(self):
        # one occupied voxel per window: attention over a single key is the identity mix
        from mvjar.pointcloud_io import Frame

        xyz = np.array([[0.1, 0.1, -1.0], [0.2, 0.15, -0.5], [1.5, 1.5, 0.0]])
        frame = Frame(np.hstack([xyz, np.zeros((3, 1))]))
        vf = voxelize(frame, GRID)
        b = assemble_masked_batch(vf, build_mask_plan(vf, "random", 0.5, 0.0, 0), WIN)
        model = MVJARModel(CFG, seed=1)
        out = model(b)
        with torch.no_grad():
            feats = torch.from_numpy(b.features)
            x = model.substitute_tokens(feats, torch.from_numpy(b.vtoken_mask), torch.from_numpy(b.ptoken_mask))
            h = model.encode_voxels(x, torch.from_numpy(b.point_mask))
            for blk in model.blocks:
                a = blk.attn
                h = h + a.proj(a.v(blk.norm1(h)))
                h = h + blk.ffn(blk.norm2(h))
            h = model.norm(h)
            expected = model.jigsaw_head(h[torch.from_numpy(b.jigsaw)])
        torch.testing.assert_close(out.logits, expected, rtol=0, atol=1e-12)

    def _permuted(self, b, perm):
        inv = np.argsort(perm)
        return replace(
            b,
            features=b.features[perm], point_mask=b.point_mask[perm],
            vtoken_mask=b.vtoken_mask[perm], ptoken_mask=b.ptoken_mask[perm],
            coords=b.coords[perm], kept=inv[b.kept], jigsaw=inv[b.jigsaw], shape=inv[b.shape],
        )

    def test_voxel_permutation_equivariance(self):
        b = make_batch(seed=5)
        perm = np.random.default_rng(0).permutation(b.num_voxels)
        model = MVJARModel(CFG, seed=2)
        a, p = model(b), model(self._permuted(b, perm))
        torch.testing.assert_close(a.logits, p.logits, rtol=0, atol=1e-12)
        torch.testing.assert_close(a.recon, p.recon, rtol=0, atol=1e-12)
        la = frame_losses(a, b).total.item()
        lp = frame_losses(p, self._permuted(b, perm)).total.item()
        assert la == pytest.approx(lp, abs=1e-12)

    def test_point_order_invariance(self):
        b = make_batch(seed=6)
        v = int(b.kept[np.argmax(b.point_mask[b.kept].sum(1))])
        t = int(b.point_mask[v].sum())
        feats = b.features.copy()
        feats[v, :t] = feats[v, :t][::-1]
        model = MVJARModel(CFG, seed=3)
        a, c = model(b), model(replace(b, features=feats))
        torch.testing.assert_close(a.logits, c.logits, rtol=0, atol=1e-12)

    def test_batched_frames_match_single(self):
        b1, b2 = make_batch(seed=7), make_batch(seed=8)
        model = MVJARModel(CFG, seed=0)
        many = model.forward_many([b1, b2])
        for single, batch in zip(many, [b1, b2]):
            alone = model(batch)
            torch.testing.assert_close(single.logits, alone.logits, rtol=0, atol=1e-12)
            torch.testing.assert_close(single.recon, alone.recon, rtol=0, atol=1e-12)


class TestGradients:
    def test_unused_head_gradient_is_zero(self):
        b = make_batch(rp=0.2, rs=0.0)
        model = MVJARModel(CFG)
        frame_losses(model(b), b).total.backward()
        for name, p in model.named_parameters():
            if name.startswith("recon_head"):
                assert p.grad is None or torch.count_nonzero(p.grad) == 0

    def test_beta_scales_recon_gradients(self):
        b = make_batch(rp=0.2, rs=0.2)
        grads = []
        for beta in (1.0, 2.0):
            model = MVJARModel(CFG, seed=0)
            frame_losses(model(b), b, 1.0, beta).total.backward()
            grads.append({n: p.grad.clone() for n, p in model.named_parameters() if n.startswith("recon_head")})
        for name in grads[0]:
            assert torch.equal(grads[1][name], 2 * grads[0][name])

    def test_mask_tokens_receive_gradients(self):
        b = make_batch(rp=0.2, rs=0.2)
        model = MVJARModel(CFG)
        frame_losses(model(b), b).total.backward()
        assert model.mask_token_v.grad.abs().sum() > 0
        assert model.mask_token_p.grad.abs().sum() > 0

    def test_gradcheck_detects_corruption(self):
        model, batch = tiny_problem(0)

        def loss_fn(m):
            return frame_losses(m(batch), batch).total

        def hook(name, g):
            if name == "mask_token_p":
                g = g.clone()
                g[0] = g[0] * 1.01 + 1e-3
            return g

        assert gradcheck(model, loss_fn, grad_hook=hook).max_rel_error > 1e-4

    def test_tiny_config_size(self):
        model, batch = tiny_problem(0)
        assert model.cfg == TINY_MODEL
        assert batch.num_voxels == 6 and batch.features.shape[1] == 4
        assert len(batch.jigsaw) >= 1 and len(batch.shape) >= 1


class TestOptim:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
        assert cosine_lr(50, 100, 1.0, 0.0) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 1.0)

    def _scalar_module(self, w0):
        m = torch.nn.Module()
        m.w = torch.nn.Parameter(torch.tensor([w0], dtype=torch.float64))
        return m

    def test_adam_hand_step(self):
        m = self._scalar_module(1.0)
        opt = build_optimizer(m, lr=0.1, weight_decay=0.0)
        w = 1.0
        mom = vel = 0.0
        for t in range(1, 4):
            opt.zero_grad()
            (0.5 * m.w ** 2).sum().backward()
            adamw_step(opt, 0.1)
            g = w
            mom = 0.9 * mom + 0.1 * g
            vel = 0.999 * vel + 0.001 * g * g
            mhat, vhat = mom / (1 - 0.9 ** t), vel / (1 - 0.999 ** t)
            w = w - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
            assert m.w.item() == pytest.approx(w, abs=1e-14)

    def test_decoupled_weight_decay(self):
        m = self._scalar_module(2.0)
        opt = build_optimizer(m, lr=0.1, weight_decay=0.5)
        m.w.grad = torch.zeros(1, dtype=torch.float64)
        adamw_step(opt, 0.1)
        assert m.w.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)

    def test_invalid_hyper(self):
        with pytest.raises(ValueError):
            build_optimizer(self._scalar_module(1.0), lr=-1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        b = make_batch(seed=1)
        model = MVJARModel(CFG, seed=9)
        save_checkpoint(model, tmp_path / "m.bin", {"epoch": 3})
        again, extra = load_checkpoint(tmp_path / "m.bin")
        assert extra == {"epoch": 3} and again.cfg == CFG
        for (n1, p1), (n2, p2) in zip(model.state_dict().items(), again.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)
        assert torch.equal(model(b).logits, again(b).logits)
        save_checkpoint(again, tmp_path / "n.bin", {"epoch": 3})
        assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"garbage" * 4)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "x.bin")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(MVJARModel(CFG), tmp_path / "m.bin")
        with open(tmp_path / "m.bin", "ab") as fh:
            fh.write(b"\0" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(tmp_path / "m.bin")
