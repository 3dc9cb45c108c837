"""Multi-task teacher-student distillation for tasks with imbalanced labels."""

from .autodiff import ComputeGraph, ParameterSet, Tensor, adam_step, backward, gradient_check
from .distill import (
    ComparisonReport,
    ConditionVerdict,
    DistillConfig,
    PseudoLabelSet,
    analyze_task_interaction,
    generate_pseudo_labels,
    merge_with_pseudo,
    run_teacher_student,
    train_teacher,
)
from .metrics import MetricsReport, improvement_ratio, miou, mse, rmse
from .model import MultiModalTeacher, MultiTaskNet, NetworkConfig, TaskHeadSpec, build_student, build_teacher
from .tasks import (
    ImbalancedDataset,
    ScenarioTasks,
    SubFunctionBank,
    build_condition_scenario,
    build_synth_segmentation,
    sample_toy_dataset,
)
from .training import TrainingConfig, evaluate, train

__version__ = "0.1.0"
