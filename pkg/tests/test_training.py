import pytest

from patchzero_lab.models import GradMode, Stage2Trigger, TrainLogRecord
from patchzero_lab.nn import params_digest
from patchzero_lab.training import (
    DetectorTrainer,
    TrainLog,
    adversarial_train_classifier,
    attacked_count,
    stage1_train_detector,
    stage2_train_detector,
    stage_switch_criterion,
    train_classifier,
)
from patchzero_lab.workflow import train_detector


def stage1_log(f1_values):
    log = TrainLog()
    for epoch, f1 in enumerate(f1_values, start=1):
        log.append(TrainLogRecord(epoch=epoch, stage="stage1", loss=0.1, first_batch_loss=0.1, last_batch_loss=0.1, val_f1=f1))
    return log


@pytest.mark.parametrize(
    "f1_values, expected",
    [
        ([], False),
        ([0.96], False),
        ([0.96, 0.97], True),
        ([0.97, 0.94], False),
        ([0.5, 0.96, 0.95], True),
    ],
)
def test_stage_switch_on_sustained_f1(fast_train_cfg, f1_values, expected):
    cfg = fast_train_cfg.model_copy(update={"stage2_trigger": Stage2Trigger(f1_threshold=0.95, patience=2)})
    assert stage_switch_criterion(stage1_log(f1_values), cfg) is expected


def test_stage_switch_at_fixed_epoch(fast_train_cfg):
    cfg = fast_train_cfg.model_copy(update={"stage2_trigger": Stage2Trigger(fixed_epoch=2)})
    assert not stage_switch_criterion(stage1_log([0.1]), cfg)
    assert stage_switch_criterion(stage1_log([0.1, 0.2]), cfg)


def test_train_log_epochs_are_monotone(tmp_path):
    log = TrainLog(path=tmp_path / "log.jsonl")
    record = TrainLogRecord(epoch=1, stage="stage1", loss=1.0, first_batch_loss=1.0, last_batch_loss=1.0)
    log.append(record)
    with pytest.raises(ValueError):
        log.append(record)
    assert TrainLog.read_jsonl(tmp_path / "log.jsonl").records == [record]


def test_attacked_count_rounds():
    assert attacked_count(8, 0.5) == 4
    assert attacked_count(7, 0.5) == 4
    assert attacked_count(8, 0.0) == 0


def test_classifier_training_is_reproducible(tiny_splits, fast_train_cfg):
    a, log_a = train_classifier(tiny_splits, fast_train_cfg)
    b, log_b = train_classifier(tiny_splits, fast_train_cfg)
    assert params_digest(a) == params_digest(b)
    assert [r.loss for r in log_a.records] == [r.loss for r in log_b.records]
    assert [r.epoch for r in log_a.records] == [1, 2]
    assert all(r.stage == "classifier" and 0.0 <= r.val_accuracy <= 1.0 for r in log_a.records)


def test_classifier_steps_with_its_own_learning_rate(tiny_splits, fast_train_cfg):
    a, _ = train_classifier(tiny_splits, fast_train_cfg.model_copy(update={"lr": 1e-6}))
    b, _ = train_classifier(tiny_splits, fast_train_cfg.model_copy(update={"lr": 0.5}))
    c, _ = train_classifier(tiny_splits, fast_train_cfg.model_copy(update={"classifier_lr": 1e-6}))
    assert params_digest(a) == params_digest(b) != params_digest(c)


def test_full_batch_classifier_loss_falls(tiny_splits, fast_train_cfg):
    cfg = fast_train_cfg.model_copy(update={"batch_size": len(tiny_splits.train), "classifier_epochs": 6, "classifier_lr": 1e-2})
    _, log = train_classifier(tiny_splits, cfg)
    losses = [r.loss for r in log.records]
    assert len(losses) == 6
    assert losses[-1] < losses[0]


def test_adversarial_training_without_attacks_is_clean_training(tiny_splits, fast_train_cfg):
    clean, _ = train_classifier(tiny_splits, fast_train_cfg)
    mixed, _ = adversarial_train_classifier(tiny_splits, fast_train_cfg.model_copy(update={"mix_ratio": 0.0}))
    assert params_digest(clean) == params_digest(mixed)


def test_adversarial_batches_mix_attacked_and_clean(tiny_splits, fast_train_cfg):
    batches = []
    adversarial_train_classifier(tiny_splits, fast_train_cfg.model_copy(update={"classifier_epochs": 1}), on_batch=batches.append)
    assert batches
    for batch in batches:
        assert batch.attacked == attacked_count(batch.batch_size, 0.5)


def test_stage1_never_touches_the_classifier(tiny_splits, tiny_classifier, fast_train_cfg, defense_cfg, tmp_path):
    digest = params_digest(tiny_classifier)
    detector, log = stage1_train_detector(tiny_classifier, tiny_splits, fast_train_cfg, defense_cfg, log_path=tmp_path / "log.jsonl")
    assert params_digest(tiny_classifier) == digest
    assert [r.stage for r in log.records] == ["stage1", "stage1"]
    assert all(r.val_f1 is not None and r.val_recall is not None for r in log.records)
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
    assert detector.version == 2 * 2


def test_stage2_attacks_the_current_detector(tiny_splits, tiny_classifier, fast_train_cfg, defense_cfg):
    detector, _ = stage1_train_detector(tiny_classifier, tiny_splits, fast_train_cfg.model_copy(update={"stage1_epochs": 1}), defense_cfg)
    start_digest = params_digest(detector)
    batches = []
    final, log = stage2_train_detector(tiny_classifier, detector, tiny_splits, fast_train_cfg, defense_cfg, on_batch=batches.append)
    assert params_digest(detector) == start_digest
    assert [r.stage for r in log.records] == ["stage2"]
    attacked = [b for b in batches if b.attacked]
    assert attacked
    for batch in attacked:
        assert batch.param_version_used == batch.param_version_current
    versions = [b.param_version_current for b in batches]
    assert versions == list(range(versions[0], versions[0] + len(versions)))


def test_validation_attack_is_cached_for_direct_gradients(tiny_splits, tiny_classifier, fast_train_cfg, defense_cfg):
    trainer = DetectorTrainer(tiny_classifier, tiny_splits, fast_train_cfg, defense_cfg)
    first = trainer.validation_attack(GradMode.DO)
    assert trainer.validation_attack(GradMode.DO) is first
    assert len(first) == fast_train_cfg.val_subset


def test_two_stage_graph_switches_at_fixed_epoch(tiny_splits, tiny_classifier, fast_train_cfg, defense_cfg):
    cfg = fast_train_cfg.model_copy(update={"stage2_trigger": Stage2Trigger(fixed_epoch=1)})
    result = train_detector(tiny_classifier, tiny_splits, cfg, defense_cfg)
    assert result.switch_epoch == 1
    assert result.switch_reason == "criterion"
    assert [r.stage for r in result.log.records] == ["stage1", "stage2"]
    assert [r.epoch for r in result.log.records] == [1, 2]
    assert params_digest(result.stage1_detector) != params_digest(result.detector)


def test_two_stage_graph_falls_back_to_the_epoch_cap(tiny_splits, tiny_classifier, fast_train_cfg, defense_cfg):
    cfg = fast_train_cfg.model_copy(update={"stage2_epochs": 0, "stage2_trigger": Stage2Trigger(f1_threshold=1.0, patience=2)})
    result = train_detector(tiny_classifier, tiny_splits, cfg, defense_cfg)
    assert result.switch_epoch == cfg.stage1_epochs
    assert [r.stage for r in result.log.records] == ["stage1"] * cfg.stage1_epochs
    assert params_digest(result.stage1_detector) == params_digest(result.detector)
