import numpy as np
import pytest

from prune_pipeline import *


def test_sgd_trainer_evaluate_range(toy_graph, small_synth, make_checkpoint):
    acc = SgdTrainer().evaluate(make_checkpoint(toy_graph), small_synth)
    assert 0.0 <= acc <= 1.0
    assert acc * small_synth.n_eval == pytest.approx(round(acc * small_synth.n_eval))


def test_sgd_trainer_fit_curve_and_hooks(toy_graph, small_synth, quiet_config):
    seen = []
    ckpt = init_params(toy_graph)
    result = SgdTrainer().fit(
        ckpt, small_synth, quiet_config, 2, on_epoch=lambda e, c: seen.append(e)
    )
    assert seen == [0, 1, 2]
    assert len(result.curve) == 2 and result.curve_start == 1
    assert not result.diverged
    assert result.best_accuracy >= max(result.curve)
    assert result.checkpoint.graph == toy_graph
    # input tensors are never written in place
    np.testing.assert_array_equal(ckpt.tensors["conv0.weight"], init_params(toy_graph).tensors["conv0.weight"])


def test_sgd_trainer_stops_at_target(toy_graph, small_synth, quiet_config):
    result = SgdTrainer().fit(init_params(toy_graph), small_synth, quiet_config, 3, target=0.0)
    assert result.curve_start == 0 and len(result.curve) == 1


def test_sgd_trainer_reports_divergence(toy_graph, small_synth):
    config = RunConfig(lr=1e30, batch_size=16, progress=False)
    with pytest.raises(TrainingDiverged):
        SgdTrainer().fit(init_params(toy_graph), small_synth, config, 2)


def test_scripted_trainer_mapping_and_target(toy_graph, small_synth, quiet_config):
    ckpt = init_params(toy_graph)
    trainer = ScriptedTrainer({(8, 0.5): [0.2, 0.6, 0.9, 0.95]}, base_accuracy=0.7)
    result = trainer.fit(
        ckpt, small_synth, quiet_config, 3, target=0.6, context=RetrainContext(8, 0.5)
    )
    assert result.curve == [0.2, 0.6]
    assert result.checkpoint is ckpt
    assert trainer.evaluate(ckpt, small_synth) == 0.7
    assert trainer.calls == [RetrainContext(8, 0.5)]
    with pytest.raises(KeyError):
        trainer.fit(ckpt, small_synth, quiet_config, 3, context=RetrainContext(4, 0.5))


def test_scripted_trainer_marks_pre_training_pass(toy_graph, small_synth, quiet_config):
    seen = []
    trainer = ScriptedTrainer({(8, 1.0): [0.97, 0.99]})
    result = trainer.fit(
        init_params(toy_graph),
        small_synth,
        quiet_config,
        3,
        target=0.95,
        context=RetrainContext(8, 1.0),
        on_epoch=lambda e, c: seen.append(e),
    )
    assert result.curve == [0.97] and result.curve_start == 0
    assert result.best_accuracy == 0.97
    assert seen == [0]
    later = trainer.fit(
        init_params(toy_graph),
        small_synth,
        quiet_config,
        3,
        target=0.98,
        context=RetrainContext(8, 1.0),
    )
    assert later.curve == [0.97, 0.99] and later.curve_start == 1


def test_sgd_trainer_non_finite_batch_is_divergence(toy_graph, small_synth, quiet_config):
    class Poisoned:
        def __init__(self, inner):
            self.inner = inner

        def __getattr__(self, name):
            return getattr(self.inner, name)

        def batches(self, split, *args, **kwargs):
            for x, y in self.inner.batches(split, *args, **kwargs):
                if split == Split.TRAIN:
                    x = x.copy()
                    x[0, 0, 0, 0] = np.nan
                yield x, y

    with pytest.raises(TrainingDiverged, match="input batch"):
        SgdTrainer().fit(init_params(toy_graph), Poisoned(small_synth), quiet_config, 1)
