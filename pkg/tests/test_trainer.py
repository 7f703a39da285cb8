import numpy as np
import pytest

from idsr.dataio import synthetic_arrays
from idsr.frnet import Embedder, ToyEmbedder
from idsr.ipunet import IPUNetConfig, build, save_checkpoint
from idsr.resample import CANONICAL_RESOLUTIONS, DegradationSpec
from idsr.tensorcore import Tensor
from idsr.trainer import (
    LossWeights,
    TrainConfig,
    TrainReport,
    batch_indices,
    embedding_loss,
    load_training_checkpoint,
    pixel_loss,
    step_resolution,
    super_resolve,
    total_loss,
    train_loop,
)

TINY = (4, 4, 8, 8, 8, 8, 8)
TOY = (8, 16, 32, 32, 32, 32, 32)


class ConstantEmbedder(Embedder):
    dim = 4

    def embed(self, images):
        return Tensor(np.full((images.shape[0], 4), 0.5, np.float32))


@pytest.fixture(scope="module")
def data():
    return synthetic_arrays(4, 2, seed=0, channels=3)[1]


def _small_embedder():
    return ToyEmbedder(widths=(4, 8, 8), dim=16, input_size=(32, 32), seed=3)


def _cfg(**kw):
    kw.setdefault("seed", 1)
    return TrainConfig(**kw)


def _net_cfg(seed=1):
    return IPUNetConfig(channel_schedule=TINY, seed=seed)


class TestLosses:
    def test_pixel_zero_and_offset(self):
        x = np.random.default_rng(0).random((2, 3, 128, 128)).astype(np.float32)
        assert pixel_loss(Tensor(x), Tensor(x)).item() == 0.0
        assert pixel_loss(Tensor(x), Tensor(x + 0.1)).item() == pytest.approx(0.01, rel=1e-4)

    def test_pixel_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
        acc = 0.0
        for idx in np.ndindex(a.shape):
            acc += (float(a[idx]) - float(b[idx])) ** 2
        assert pixel_loss(Tensor(a), Tensor(b)).item() == pytest.approx(acc / a.size, abs=1e-6)

    def test_embedding_equal_and_antipodal(self):
        u = np.random.default_rng(2).normal(size=(3, 16))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        assert embedding_loss(Tensor(u), Tensor(u)).item() == 0.0
        assert embedding_loss(Tensor(-u), Tensor(u)).item() == pytest.approx(4 / 16, rel=1e-5)

    def test_embedding_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        acc = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(6)) / 24
        assert embedding_loss(Tensor(a), Tensor(b)).item() == pytest.approx(acc, abs=1e-6)

    def test_hr_embedding_gets_no_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.zeros((2, 3)), requires_grad=True)
        embedding_loss(a, b).backward()
        assert a.grad is not None and (b.grad is None or not np.any(b.grad))

    @pytest.mark.parametrize("l_pix,l_emb,w,expected", [
        (0.0, 0.0, LossWeights(), 0.0),
        (1.0, 2.0, LossWeights(beta=5.0), 7.0),
        (3.0, 2.0, LossWeights(beta=0.0), 2.0),
        (1.0, 2.0, LossWeights(beta=5.0, embedding_weight=0.0), 5.0),
    ])
    def test_total(self, l_pix, l_emb, w, expected):
        assert total_loss(Tensor(np.array(l_pix)), Tensor(np.array(l_emb)), w).item() == expected

    def test_negative_weights(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-1)


class TestSchedule:
    def test_epochs_cover_dataset(self):
        seen = np.concatenate([batch_indices(12, 4, 0, s) for s in range(6)])
        assert sorted(seen[:12]) == list(range(12)) and sorted(seen[12:]) == list(range(12))

    def test_batch_straddles_epoch(self):
        idx = batch_indices(5, 4, 0, 1)
        assert len(idx) == 4 and set(idx) <= set(range(5))

    def test_resolution_in_set(self):
        cfg = _cfg()
        assert {step_resolution(cfg, s) for s in range(300)} == set(CANONICAL_RESOLUTIONS)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(steps=-1)
        with pytest.raises(ValueError):
            TrainConfig(resolution_set=())
        assert TrainConfig(resolution_set=[(7, 6)]).resolution_set == (DegradationSpec(7, 6),)


class TestTraining:
    def test_loss_identity_every_step(self, data):
        _, rep = train_loop(data, _cfg(steps=15), _small_embedder(), net_config=_net_cfg())
        for r in rep.rows:
            bound = 4 * np.spacing(np.float32(r.l_total)) + 1e-12
            assert abs(r.l_total - (r.l_embedding + 5.0 * r.l_pixel)) <= bound

    def test_embedder_hash_unchanged(self, data):
        emb = _small_embedder()
        before = emb.parameter_hash()
        train_loop(data, _cfg(steps=100), emb, net_config=_net_cfg())
        assert emb.parameter_hash() == before

    def test_same_seed_same_report(self, data):
        a = train_loop(data, _cfg(steps=12), _small_embedder(), net_config=_net_cfg())[1]
        b = train_loop(data, _cfg(steps=12), _small_embedder(), net_config=_net_cfg())[1]
        assert a.rows == b.rows
        c = train_loop(data, _cfg(steps=12, seed=2), _small_embedder(), net_config=_net_cfg())[1]
        assert a.rows != c.rows

    def test_workers_do_not_change_results(self, data):
        a = train_loop(data, _cfg(steps=6), _small_embedder(), net_config=_net_cfg())[1]
        b = train_loop(data, _cfg(steps=6, workers=2), _small_embedder(), net_config=_net_cfg())[1]
        assert a.rows == b.rows

    @pytest.mark.parametrize("stop", [10, 20])
    def test_resume_equals_unbroken(self, data, tmp_path, stop):
        emb = _small_embedder()
        full_net, full = train_loop(data, _cfg(steps=30), emb, net_config=_net_cfg())
        train_loop(data, _cfg(steps=30, checkpoint_every=10), emb, net_config=_net_cfg(), checkpoint_dir=tmp_path,
                   stop_after=stop)
        net, rep = train_loop(data, _cfg(steps=30), emb, resume=tmp_path / f"step_{stop}.ckpt")
        assert rep.rows == full.rows
        for (_, a), (_, b) in zip(full_net.state_arrays(), net.state_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_zero_steps_keeps_net(self, data):
        net = build(_net_cfg())
        before = [p.data.copy() for p in net.parameters()]
        out, rep = train_loop(data, _cfg(steps=0), _small_embedder(), net=net)
        assert out is net and len(rep) == 0
        for a, p in zip(before, out.parameters()):
            np.testing.assert_array_equal(a, p.data)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="non-empty"):
            train_loop(np.zeros((0, 3, 128, 128), np.float32), _cfg(steps=1), _small_embedder())

    def test_fixed_batch_overfits(self, data):
        """Constant embedder, 4 images, 200 steps; lr raised to 1e-3 (see the decisions ledger)."""
        _, rep = train_loop(data[:4], _cfg(steps=200, lr=1e-3, seed=0), ConstantEmbedder(),
                            net_config=IPUNetConfig(channel_schedule=TOY))
        lp = rep.column("l_pixel")
        assert lp[-1] < 0.1 * lp[0]
        assert lp[-50:].mean() < lp[:50].mean()
        assert np.all(rep.column("l_embedding") == 0)

    def test_large_beta_is_pixel_regression(self, data):
        emb = _small_embedder()
        net_a, _ = train_loop(data, _cfg(steps=20, weights=LossWeights(1e6, 1.0)), emb, net_config=_net_cfg())
        net_b, _ = train_loop(data, _cfg(steps=20, weights=LossWeights(5.0, 0.0)), emb, net_config=_net_cfg())
        x = data[:2]
        sa, sb = super_resolve(net_a, x), super_resolve(net_b, x)
        assert np.abs(sa - sb).max() < 1e-3
        assert np.mean((sa - x) ** 2) == pytest.approx(np.mean((sb - x) ** 2), rel=1e-3)

    def test_plain_checkpoint_is_not_resumable(self, tmp_path):
        save_checkpoint(build(_net_cfg()), tmp_path / "n.ckpt")
        with pytest.raises(ValueError, match="not a training checkpoint"):
            load_training_checkpoint(tmp_path / "n.ckpt")

    def test_report_csv_round_trip(self, data, tmp_path):
        _, rep = train_loop(data, _cfg(steps=3), _small_embedder(), net_config=_net_cfg())
        rep.write_csv(tmp_path / "r.csv")
        assert TrainReport.read_csv(tmp_path / "r.csv").rows == rep.rows
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "step,res_h,res_w,l_pixel,l_embedding,l_total"
