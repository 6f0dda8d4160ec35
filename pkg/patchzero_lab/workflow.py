import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, TypedDict

from langgraph.graph import END, StateGraph

from .data import DatasetSplits
from .models import DefenseConfig, TrainConfig
from .nn import ClassifierParams, DetectorParams
from .training import BatchHook, DetectorTrainer, TrainLog, stage_switch_criterion

logger = logging.getLogger(__name__)


class DetectorTrainingState(TypedDict, total=False):
    stage1_epochs_run: int
    stage2_epochs_run: int
    switch_epoch: int
    switch_reason: str
    stage1_detector: DetectorParams


@dataclass(eq=False)
class DetectorTrainingResult:
    stage1_detector: DetectorParams
    detector: DetectorParams
    log: TrainLog
    switch_epoch: int
    switch_reason: str


def build_detector_graph(trainer: DetectorTrainer):
    """stage1 epochs until the switch criterion (or the epoch cap), then stage2 epochs."""
    cfg = trainer.cfg
    graph_builder = StateGraph(DetectorTrainingState)

    def node_stage1(state: DetectorTrainingState) -> DetectorTrainingState:
        trainer.run_epoch("stage1")
        return {**state, "stage1_epochs_run": state.get("stage1_epochs_run", 0) + 1}

    def node_switch(state: DetectorTrainingState) -> DetectorTrainingState:
        converged = stage_switch_criterion(trainer.log, cfg)
        reason = "criterion" if converged else "stage1 epochs exhausted"
        if not converged:
            logger.warning("Stage-1 F1 never held above %.3f; switching after %d epochs", cfg.stage2_trigger.f1_threshold, cfg.stage1_epochs)
        logger.info("Switching to stage 2 after epoch %d (%s)", trainer.log.last_epoch, reason)
        return {
            **state,
            "switch_epoch": trainer.log.last_epoch,
            "switch_reason": reason,
            "stage1_detector": trainer.detector.copy(),
        }

    def node_stage2(state: DetectorTrainingState) -> DetectorTrainingState:
        trainer.run_epoch("stage2")
        return {**state, "stage2_epochs_run": state.get("stage2_epochs_run", 0) + 1}

    def stage1_decision(state: DetectorTrainingState) -> str:
        if stage_switch_criterion(trainer.log, cfg) or state.get("stage1_epochs_run", 0) >= cfg.stage1_epochs:
            return "switch"
        return "stage1"

    def switch_decision(state: DetectorTrainingState) -> str:
        return "stage2" if cfg.stage2_epochs > 0 else "done"

    def stage2_decision(state: DetectorTrainingState) -> str:
        return "done" if state.get("stage2_epochs_run", 0) >= cfg.stage2_epochs else "stage2"

    graph_builder.add_node("stage1", node_stage1)
    graph_builder.add_node("switch", node_switch)
    graph_builder.add_node("stage2", node_stage2)

    graph_builder.set_entry_point("stage1")
    graph_builder.add_conditional_edges("stage1", stage1_decision, {"stage1": "stage1", "switch": "switch"})
    graph_builder.add_conditional_edges("switch", switch_decision, {"stage2": "stage2", "done": END})
    graph_builder.add_conditional_edges("stage2", stage2_decision, {"stage2": "stage2", "done": END})

    return graph_builder.compile()


def train_detector(
    classifier: ClassifierParams,
    splits: DatasetSplits,
    cfg: TrainConfig,
    defense: DefenseConfig,
    on_batch: Optional[BatchHook] = None,
    log_path: Optional[Path] = None,
) -> DetectorTrainingResult:
    trainer = DetectorTrainer(classifier, splits, cfg, defense, on_batch=on_batch, log=TrainLog(path=log_path))
    app = build_detector_graph(trainer)
    # Every epoch is one graph step; leave headroom for the switch node.
    limit = cfg.stage1_epochs + cfg.stage2_epochs + 10
    final_state = app.invoke({}, config={"recursion_limit": limit})
    logger.info(
        "Detector training done: %d stage-1 and %d stage-2 epochs",
        final_state.get("stage1_epochs_run", 0),
        final_state.get("stage2_epochs_run", 0),
    )
    return DetectorTrainingResult(
        stage1_detector=final_state["stage1_detector"],
        detector=trainer.detector,
        log=trainer.log,
        switch_epoch=final_state["switch_epoch"],
        switch_reason=final_state["switch_reason"],
    )
