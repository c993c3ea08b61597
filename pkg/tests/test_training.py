"""Tests for the control-only training loop and early stopping."""

import numpy as np
import pytest

from mvood.models import VAEConfig, build_model
from mvood.preprocess import SliceSample
from mvood.training import EarlyStopper, TrainConfig, TrainHistory, fit

TINY = VAEConfig(input_hw=(8, 8), channels=(2, 4), latent_dim=4)


def _slices(n, label=0, seed=0, pid="P000", hw=(8, 8)):
    rng = np.random.default_rng(seed)
    return [
        SliceSample(rng.uniform(0, 1, hw).astype(np.float32), label, pid, "axial", k)
        for k in range(n)
    ]


# ---------------------------------------------------------------------------
# config and history
# ---------------------------------------------------------------------------

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.max_epochs, cfg.patience, cfg.lr, cfg.batch_size) == (250, 30, 1e-4, 32)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=10)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_history_best_epoch_ties_earliest():
    h = TrainHistory(train_losses=[3, 2, 1], val_losses=[2.0, 1.0, 1.0])
    assert h.best_epoch == 2
    assert h.stopped_epoch == 3


def test_history_csv(tmp_path):
    h = TrainHistory(train_losses=[0.5, 0.25], val_losses=[0.6, 0.3])
    h.save_csv(tmp_path / "history.csv")
    lines = (tmp_path / "history.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert lines[1].startswith("1,0.5")
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class TestEarlyStopper:
    def test_decreasing_losses_continue(self):
        stopper = EarlyStopper(patience=30)
        assert all(stopper.update(loss) == "continue" for loss in [3.0, 2.0, 1.0])

    def test_best_at_first_then_stall_stops_at_31(self):
        stopper = EarlyStopper(patience=30)
        decisions = [stopper.update(1.0)]
        decisions += [stopper.update(2.0) for _ in range(30)]
        assert decisions[:-1] == ["continue"] * 30
        assert decisions[-1] == "stop"
        assert len(decisions) == 31

    def test_improvement_resets_counter(self):
        stopper = EarlyStopper(patience=2)
        assert stopper.update(3.0) == "continue"
        assert stopper.update(3.5) == "continue"   # stale 1
        assert stopper.update(2.9) == "continue"   # improvement, reset
        assert stopper.update(3.0) == "continue"   # stale 1
        assert stopper.update(3.0) == "stop"       # stale 2

    def test_equal_loss_is_not_improvement(self):
        stopper = EarlyStopper(patience=1)
        assert stopper.update(1.0) == "continue"
        assert stopper.update(1.0) == "stop"


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

class TestFit:
    def test_lesion_in_train_errors_before_epoch_one(self):
        model = build_model("svae", TINY, seed=0)
        before = model.params.copy_values()
        train = _slices(8) + _slices(2, label=1, pid="P001")
        with pytest.raises(ValueError, match="controls only"):
            fit(model, train, _slices(4, seed=1), TrainConfig(max_epochs=5, patience=2, seed=0))
        for name, arr in model.params.copy_values().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_empty_validation_errors(self):
        model = build_model("svae", TINY, seed=0)
        with pytest.raises(ValueError, match="validation"):
            fit(model, _slices(8), [], TrainConfig(max_epochs=5, patience=2))

    def test_fixed_seed_identical_histories(self):
        cfg = TrainConfig(max_epochs=4, patience=2, lr=1e-3, seed=3)
        histories = []
        for _ in range(2):
            model = build_model("svae", TINY, seed=1)
            _, history = fit(model, _slices(12), _slices(6, seed=5), cfg)
            histories.append(history)
        assert histories[0].train_losses == histories[1].train_losses
        assert histories[0].val_losses == histories[1].val_losses

    def test_loss_decreases_over_training(self):
        """Training loss at the last epoch undercuts epoch 1 on a small run."""
        model = build_model("svae", TINY, seed=2)
        _, history = fit(
            model, _slices(40, seed=7), _slices(10, seed=8),
            TrainConfig(max_epochs=10, patience=8, lr=1e-3, seed=0),
        )
        assert history.train_losses[-1] < history.train_losses[0]

    def test_returns_best_validation_params(self):
        model = build_model("svae", TINY, seed=4)
        best, history = fit(
            model, _slices(16, seed=9), _slices(8, seed=10),
            TrainConfig(max_epochs=6, patience=4, lr=1e-3, seed=1),
        )
        assert min(history.val_losses) == history.val_losses[history.best_epoch - 1]
        for name, arr in model.params.copy_values().items():
            np.testing.assert_array_equal(arr, best[name])

    def test_history_length_is_stopped_epoch(self):
        model = build_model("svae", TINY, seed=5)
        _, history = fit(
            model, _slices(8), _slices(4, seed=1),
            TrainConfig(max_epochs=5, patience=3, seed=0),
        )
        assert history.stopped_epoch == len(history.train_losses) <= 5

    def test_validation_uses_controls_only(self):
        """Case slices in the tuning split are excluded from the val loss."""
        model_a = build_model("svae", TINY, seed=6)
        val_controls = _slices(6, seed=11)
        _, hist_a = fit(model_a, _slices(8, seed=12), val_controls,
                        TrainConfig(max_epochs=3, patience=2, seed=2))
        model_b = build_model("svae", TINY, seed=6)
        val_mixed = val_controls + _slices(4, label=1, seed=13, pid="P009")
        _, hist_b = fit(model_b, _slices(8, seed=12), val_mixed,
                        TrainConfig(max_epochs=3, patience=2, seed=2))
        assert hist_a.val_losses == hist_b.val_losses

    def test_multiview_fit_runs(self):
        from mvood.datasets import make_view_triplets

        def patient(pid, seed):
            rng = np.random.default_rng(seed)
            out = []
            for view in ("axial", "coronal", "sagittal"):
                for k in range(4):
                    out.append(SliceSample(
                        rng.uniform(0, 1, (8, 8)).astype(np.float32), 0, pid, view, k))
            return out

        cfg = VAEConfig(input_hw=(8, 8), channels=(2, 4), latent_dim=4, multi_view=True)
        model = build_model("mvae", cfg, seed=0)
        train = make_view_triplets(patient("P000", 0) + patient("P001", 1))
        val = make_view_triplets(patient("P002", 2))
        _, history = fit(model, train, val, TrainConfig(max_epochs=3, patience=2, seed=0))
        assert len(history.train_losses) == 3
