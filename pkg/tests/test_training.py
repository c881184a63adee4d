import math
import pickle

import pandas as pd
import pytest
import torch

from hcd.checkpoint import load_checkpoint, new_train_state
from hcd.errors import CheckpointIntegrityError, ConfigurationError, InvalidArgumentError, NonFiniteLossError
from hcd.evaluation import psnr
from hcd.haze import synth_from_config
from hcd.imaging import list_pairs, load_image
from hcd.losses import PerceptualEncoder
from hcd.network import dehaze_image
from hcd.state_data import HazePairRecord
from hcd.state_model import VARIANT_FLAGS, ModelConfig
from hcd.state_training import TrainConfig
from hcd.training import (
    KeyedBatchSampler,
    KeyedPairDataset,
    augment_pair,
    load_pairs,
    lr_at,
    run_training,
    train_step,
)
from hcd.utils import rng_for


class TestSchedule:
    cfg = TrainConfig(total_steps=1000)

    def test_anchors(self):
        assert lr_at(0, self.cfg) == pytest.approx(2e-4, rel=1e-12)
        assert lr_at(1000, self.cfg) == pytest.approx(1e-6, rel=1e-12)
        assert lr_at(500, self.cfg) == pytest.approx(1.005e-4, rel=1e-12)

    def test_non_increasing(self):
        rates = [lr_at(s, self.cfg) for s in range(0, 1001)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("step", [-1, 1001])
    def test_out_of_range(self, step):
        with pytest.raises(InvalidArgumentError):
            lr_at(step, self.cfg)

    def test_empty_schedule(self):
        assert lr_at(0, TrainConfig(total_steps=0)) == 2e-4

    def test_config_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(crop=30)
        with pytest.raises(ValueError):
            TrainConfig(lr_init=1e-4, lr_final=1e-3)


class TestAugment:
    def _pair(self, h=20, w=24):
        hazy = torch.rand(3, h, w)
        clear = torch.rand(3, h, w)
        hazy[:, 7, 11] = 5.0
        clear[:, 7, 11] = 5.0
        return HazePairRecord(hazy=hazy, clear=clear)

    def test_marker_stays_aligned(self):
        pair = self._pair()
        for seed in range(12):
            out = augment_pair(pair, rng_for(seed), crop=16)
            assert out.hazy.shape == (3, 16, 16)
            assert torch.equal(out.hazy == 5.0, out.clear == 5.0)

    def test_inverse_rotation_recovers_crop(self):
        pair = self._pair()
        for seed in range(12):
            out = augment_pair(pair, rng_for(seed), crop=12)
            top, left = out.meta["crop_offset"]
            turns = out.meta["rot90"]
            assert turns in (0, 1, 2, 3)
            undone = torch.rot90(out.hazy, -turns, dims=(1, 2))
            assert torch.equal(undone, pair.hazy[:, top : top + 12, left : left + 12])

    def test_small_images_are_padded(self):
        out = augment_pair(self._pair(10, 6), rng_for(0), crop=16)
        assert out.hazy.shape == out.clear.shape == (3, 16, 16)
        assert torch.isfinite(out.hazy).all()

    def test_all_rotations_are_drawn(self):
        pair = self._pair()
        turns = {augment_pair(pair, rng_for(s), crop=8).meta["rot90"] for s in range(64)}
        assert turns == {0, 1, 2, 3}


class TestKeyedData:
    def test_items_depend_only_on_key(self, tiny_dataset):
        pairs, _ = list_pairs(tiny_dataset)
        a = KeyedPairDataset(pairs, seed=3, crop=16)
        b = KeyedPairDataset(pairs, seed=3, crop=16)
        b[(9, 1)]
        for key in [(0, 0), (0, 1), (5, 0)]:
            ha, ca, ia = a[key]
            hb, cb, ib = b[key]
            assert ia == ib and torch.equal(ha, hb) and torch.equal(ca, cb)

    def test_cache_is_bounded(self, tiny_dataset):
        pairs, _ = list_pairs(tiny_dataset)
        data = KeyedPairDataset(pairs, seed=3, crop=16, cache_size=2)
        for index in range(5):
            data.load(index)
        assert data.load.cache_info().currsize == 2
        assert torch.equal(data.load(0).hazy, load_image(pairs[0].hazy))

    def test_survives_pickling(self, tiny_dataset):
        pairs, _ = list_pairs(tiny_dataset)
        data = KeyedPairDataset(pairs, seed=3, crop=16, cache_size=4)
        data[(1, 0)]
        copy = pickle.loads(pickle.dumps(data))
        assert copy.load.cache_info().currsize == 0
        ha, ca, ia = data[(2, 1)]
        hb, cb, ib = copy[(2, 1)]
        assert ia == ib and torch.equal(ha, hb) and torch.equal(ca, cb)

    def test_sampler_keys(self):
        sampler = KeyedBatchSampler(2, 4, 3)
        assert len(sampler) == 2
        assert list(sampler) == [[(2, 0), (2, 1), (2, 2)], [(3, 0), (3, 1), (3, 2)]]


def _batch(seed=0, n=2, side=16):
    gen = torch.Generator().manual_seed(seed)
    hazy = torch.rand(n, 3, side, side, generator=gen)
    clear = torch.rand(n, 3, side, side, generator=gen)
    return hazy, clear, torch.arange(n) + 10


class TestTrainStep:
    def test_zero_learning_rate_keeps_weights(self, toy_model_config):
        cfg = TrainConfig(total_steps=1, lr_final=0.0, crop=16, batch=2)
        state = new_train_state(toy_model_config, cfg)
        state["step"] = 1
        before = {k: v.clone() for k, v in state["model"].state_dict().items()}
        row = train_step(state, _batch(), cfg, use_hcl=False)
        assert row.lr == 0.0
        assert state["step"] == 2
        after = state["model"].state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_same_seed_same_loss(self, toy_model_config):
        cfg = TrainConfig(total_steps=10, crop=16, batch=2)
        encoder = PerceptualEncoder.random_tiny()
        losses = []
        for _ in range(2):
            state = new_train_state(toy_model_config, cfg)
            losses.append(train_step(state, _batch(), cfg, use_hcl=True, encoder=encoder).total)
        assert abs(losses[0] - losses[1]) <= 1e-6

    def test_disabled_contrastive_equals_zero_lambda(self, toy_model_config):
        encoder = PerceptualEncoder.random_tiny()
        off = TrainConfig(total_steps=10, crop=16, batch=2)
        zero = TrainConfig(total_steps=10, crop=16, batch=2, **{"lambda": 0.0})
        a = train_step(new_train_state(toy_model_config, off), _batch(), off, use_hcl=False)
        b = train_step(new_train_state(toy_model_config, zero), _batch(), zero, use_hcl=True, encoder=encoder)
        assert a.char == b.char
        assert a.total == b.total

    def test_history_row(self, toy_model_config):
        cfg = TrainConfig(total_steps=10, crop=16, batch=2)
        state = new_train_state(toy_model_config, cfg)
        row = train_step(state, _batch(), cfg, use_hcl=False)
        assert state["history"] == [row]
        assert row.step == 1 and row.val_psnr is None and row.wall_ms >= 0

    @pytest.mark.parametrize("name", list(VARIANT_FLAGS))
    def test_every_variant_takes_a_step(self, name):
        model_cfg = ModelConfig.variant(
            name, base_width=4, him_submodules=1, feb_layers=2, feb_growth=4, fab_reduction=2
        )
        cfg = TrainConfig(total_steps=10, crop=16, batch=2)
        state = new_train_state(model_cfg, cfg)
        before = {k: v.clone() for k, v in state["model"].state_dict().items()}
        encoder = PerceptualEncoder.random_tiny() if model_cfg.use_hcl else None
        row = train_step(state, _batch(), cfg, use_hcl=model_cfg.use_hcl, encoder=encoder)
        assert state["step"] == 1
        assert math.isfinite(row.total)
        assert (row.hcl > 0) == model_cfg.use_hcl
        after = state["model"].state_dict()
        assert any(not torch.equal(before[k], after[k]) for k in before)

    def test_non_finite_input_names_the_sample(self, toy_model_config):
        cfg = TrainConfig(total_steps=10, crop=16, batch=2)
        state = new_train_state(toy_model_config, cfg)
        hazy, clear, indices = _batch()
        clear[1, 0, 3, 3] = float("nan")
        with pytest.raises(NonFiniteLossError) as info:
            train_step(state, (hazy, clear, indices), cfg, use_hcl=False)
        assert info.value.batch_indices == [11]
        assert info.value.step == 0


class TestRunTraining:
    def test_zero_steps_writes_initial_checkpoint(self, tiny_settings, tmp_path):
        tiny_settings.train.total_steps = 0
        run_training(tiny_settings, tmp_path)
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["latest.ckpt", "step_000000.ckpt"]
        assert (tmp_path / "effective_config.json").exists()

    def test_metrics_rows(self, tiny_settings, tmp_path):
        last = run_training(tiny_settings, tmp_path)
        frame = pd.read_csv(tmp_path / "metrics.csv")
        validation = frame["val_psnr"].notna().sum()
        assert validation == 2
        assert len(frame) == tiny_settings.train.total_steps + validation
        assert list(frame.columns) == ["step", "lr", "char", "hcl", "total", "val_psnr", "wall_ms"]
        assert last.name == "step_000004.ckpt"
        assert load_checkpoint(last).state["step"] == 4

    def test_resume_matches_uninterrupted(self, tiny_settings, tmp_path):
        straight = run_training(tiny_settings, tmp_path / "straight")
        run_training(tiny_settings, tmp_path / "resumed", stop_at=2)
        assert load_checkpoint(tmp_path / "resumed" / "checkpoints" / "latest.ckpt").state["step"] == 2
        resumed = run_training(tiny_settings, tmp_path / "resumed")

        a = load_checkpoint(straight).state
        b = load_checkpoint(resumed).state
        wa, wb = a["model"].state_dict(), b["model"].state_dict()
        assert max((wa[k] - wb[k]).abs().max().item() for k in wa) <= 1e-6
        totals_a = [r.total for r in a["history"] if r.total is not None]
        totals_b = [r.total for r in b["history"] if r.total is not None]
        assert totals_a == pytest.approx(totals_b, abs=1e-6)

    def test_resume_rejects_other_architecture(self, tiny_settings, tmp_path):
        tiny_settings.train.total_steps = 0
        run_training(tiny_settings, tmp_path)
        tiny_settings.model.base_width = 8
        with pytest.raises(ConfigurationError):
            run_training(tiny_settings, tmp_path)

    def test_corrupt_checkpoint_on_resume(self, tiny_settings, tmp_path):
        latest = tmp_path / "checkpoints" / "latest.ckpt"
        latest.parent.mkdir(parents=True)
        latest.write_bytes(b"garbage")
        with pytest.raises(CheckpointIntegrityError):
            run_training(tiny_settings, tmp_path)

    def test_missing_dataset(self, tiny_settings, tmp_path):
        tiny_settings.train.dataset_dir = None
        with pytest.raises(ConfigurationError):
            run_training(tiny_settings, tmp_path)


@pytest.mark.slow
def test_desk_scale_training_improves(tmp_path):
    from hcd.config import HcdSettings

    data = tmp_path / "data"
    synth_from_config(data, None, 200, 0, (0.6, 1.8), (0.7, 1.0), "random", 32, 64)
    settings = HcdSettings(
        model=ModelConfig(base_width=8, him_submodules=1, use_hcl=False),
        train=TrainConfig(
            crop=64, batch=4, lr_init=1e-3, total_steps=200, val_every=200,
            checkpoint_every=200, log_every=50, val_count=20, dataset_dir=str(data),
        ),
    )
    last = run_training(settings, tmp_path / "run")

    frame = pd.read_csv(tmp_path / "run" / "metrics.csv")
    totals = frame[frame["total"].notna()]["total"].to_numpy()
    assert totals[-10:].mean() <= 0.5 * totals[:10].mean()

    model = load_checkpoint(last).state["model"]
    pairs, _ = list_pairs(data)
    held_out = load_pairs(pairs[-20:])
    restored = [psnr(dehaze_image(model, p.hazy)[0], p.clear) for p in held_out]
    baseline = [psnr(p.hazy, p.clear) for p in held_out]
    assert sum(restored) / len(restored) >= sum(baseline) / len(baseline) + 1.0
