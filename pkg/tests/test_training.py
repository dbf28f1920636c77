import numpy as np
import pytest

from spoofmamba.io import load_checkpoint, save_checkpoint
from spoofmamba.model import BONAFIDE, SPOOF, ModelConfig, SpoofMamba
from spoofmamba.numerics import NonFiniteError, Parameter
from spoofmamba.training import (Adam, OptimState, adam_step, fit_length, overfit_stop, spectral_notch,
                                 synthetic_dataset, train_loop, train_step, StepRecord)


@pytest.fixture(scope="module")
def dataset():
    return synthetic_dataset()


@pytest.fixture(scope="module")
def small_batch(dataset):
    waves, labels = dataset
    idx = [0, 1, 16, 17]
    return waves[idx], labels[idx]


class TestAdam:
    def test_decay_only_shrinks(self):
        p = Parameter(np.array([0.5, -2.0, 3.0]))
        state = OptimState.for_params([p], lr=5e-4, weight_decay=1e-4)
        adam_step([p], [np.zeros(3)], state)
        assert np.all(np.abs(p.data) < [0.5, 2.0, 3.0])

    def test_first_step_magnitude(self):
        g = np.array([0.3, -4.0, 1e-2])
        p = Parameter(np.zeros(3), dtype=np.float64)
        state = OptimState.for_params([p], lr=5e-4, weight_decay=0.0)
        adam_step([p], [g], state)
        # bias correction makes m_hat = g and v_hat = g^2 after one step
        np.testing.assert_allclose(p.data, -5e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(np.abs(p.data), 5e-4, rtol=1e-5)

    def test_hand_computed_two_steps(self):
        p = Parameter(np.array([1.0]), dtype=np.float64)
        state = OptimState.for_params([p], lr=0.1, weight_decay=0.5)
        adam_step([p], [np.array([2.0])], state)
        g1 = 2.0 + 0.5 * 1.0
        assert p.data[0] == pytest.approx(1.0 - 0.1 * g1 / (g1 + 1e-8), abs=1e-12)
        p1 = p.data[0]
        adam_step([p], [np.array([-1.0])], state)
        g2 = -1.0 + 0.5 * p1
        m = (0.1 * g1 * 0.9 + 0.1 * g2) / (1 - 0.9 ** 2)
        v = (0.001 * g1 ** 2 * 0.999 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
        assert p.data[0] == pytest.approx(p1 - 0.1 * m / (np.sqrt(v) + 1e-8), abs=1e-12)

    def test_deterministic(self, rng):
        g = rng.standard_normal(5)
        out = []
        for _ in range(2):
            p = Parameter(np.ones(5))
            state = OptimState.for_params([p])
            for _ in range(3):
                adam_step([p], [g], state)
            out.append(p.data)
        np.testing.assert_array_equal(*out)

    def test_nan_gradient_aborts(self):
        p = Parameter(np.ones(2))
        opt = Adam([("layer.weight", p)])
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NonFiniteError, match="layer.weight"):
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 1.0])
        assert opt.state.step == 0

    def test_missing_gradient_is_decay_only(self):
        p = Parameter(np.array([2.0]))
        opt = Adam([("w", p)], weight_decay=0.0)
        opt.step()
        assert p.data[0] == 2.0


class TestData:
    def test_repeat_pad(self):
        raw = np.arange(32000, dtype=np.float32)
        out = fit_length(raw)
        assert out.shape == (64600,)
        np.testing.assert_array_equal(out, raw[np.arange(64600) % 32000])

    def test_crop_first(self):
        raw = np.arange(100000, dtype=np.float32)
        np.testing.assert_array_equal(fit_length(raw), raw[:64600])

    def test_random_window(self):
        raw = np.arange(100000, dtype=np.float32)
        out = fit_length(raw, rng=np.random.default_rng(0))
        assert out.shape == (64600,)
        np.testing.assert_array_equal(np.diff(out), 1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_length(np.zeros(0))

    def test_synthetic_layout(self, dataset):
        waves, labels = dataset
        assert waves.shape == (32, 64600) and waves.dtype == np.float32
        np.testing.assert_array_equal(labels, [BONAFIDE] * 16 + [SPOOF] * 16)
        assert np.abs(waves[:16]).max() <= 0.3 + 1e-6

    def test_spoof_carries_the_notch(self, dataset):
        waves, _ = dataset
        freqs = np.fft.rfftfreq(64600, 1 / 16000)
        band = (freqs > 2050) & (freqs < 2950)
        for bona, spoof in zip(waves[:16], waves[16:]):
            e_bona = np.abs(np.fft.rfft(bona.astype(np.float64))[band]).sum()
            e_spoof = np.abs(np.fft.rfft(spoof.astype(np.float64))[band]).sum()
            assert e_spoof < 1e-3 * e_bona
        np.testing.assert_allclose(spectral_notch(np.ones(1000)), 1.0, atol=1e-12)

    def test_seeded(self):
        a, _ = synthetic_dataset(2, seed=4, length=2000)
        b, _ = synthetic_dataset(2, seed=4, length=2000)
        np.testing.assert_array_equal(a, b)


class TestLoop:
    def test_one_item_one_step(self, dataset):
        waves, labels = dataset
        result = train_loop(waves[:1], labels[:1], ModelConfig(), epochs=1)
        assert len(result.history) == 1
        assert result.optimizer.state.step == 1

    def test_batches_per_epoch(self, small_batch):
        waves, labels = small_batch
        result = train_loop(waves, labels, ModelConfig(), epochs=2, batch_size=3)
        assert [r.epoch for r in result.history] == [0, 0, 1, 1]
        assert len(result.epoch_losses) == 2 and result.best_state is not None

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_loop(np.zeros((0, 64600), dtype=np.float32), np.zeros(0, dtype=int))

    def test_loss_decreases_on_frozen_batch(self, small_batch):
        waves, labels = small_batch
        model = SpoofMamba(ModelConfig())
        opt = Adam(model.named_parameters())
        losses = [train_step(model, opt, waves, labels)[0] for _ in range(10)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_log_lines(self, small_batch, tmp_path):
        waves, labels = small_batch
        path = tmp_path / "train.log"
        with open(path, "w") as fh:
            train_loop(waves, labels, ModelConfig(), epochs=1, batch_size=2, log_file=fh)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        epoch, step, loss, lr = lines[1].split()
        assert (epoch, step, lr) == ("0", "2", "0.0005")
        float(loss)

    def test_resume_is_bit_exact(self, small_batch, tmp_path):
        waves, labels = small_batch
        cfg = ModelConfig(seed=1)
        straight = train_loop(waves, labels, cfg, epochs=3, batch_size=2)
        first = train_loop(waves, labels, cfg, epochs=2, batch_size=2)
        save_checkpoint(tmp_path / "mid.ckpt", first.model, first.optimizer, epoch=1)
        model, opt = load_checkpoint(tmp_path / "mid.ckpt")
        resumed = train_loop(waves, labels, cfg, epochs=1, batch_size=2, model=model, optimizer=opt,
                             start_epoch=2)
        assert [r.loss for r in resumed.history] == [r.loss for r in straight.history[4:]]
        for (name, a), (_, b) in zip(straight.model.state_dict().items(), resumed.model.state_dict().items()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_overfit_stop(self):
        stop = overfit_stop(0.05)
        assert stop(StepRecord(0, 1, 0.01, 1.0, 5e-4))
        assert not stop(StepRecord(0, 1, 0.01, 0.97, 5e-4))
        assert not stop(StepRecord(0, 1, 0.06, 1.0, 5e-4))

    def test_max_steps(self, small_batch):
        waves, labels = small_batch
        result = train_loop(waves, labels, ModelConfig(), epochs=5, batch_size=1, max_steps=2)
        assert len(result.history) == 2 and result.stopped_early
