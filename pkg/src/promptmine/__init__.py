"""Semi-supervised segmentation via pseudo labels mined from a frozen
promptable teacher."""

from .data import (
    AugmentationConfig,
    ImageSample,
    ShapeSpec,
    SplitManifest,
    augment,
    generate_synthetic_dataset,
    load_dataset,
    make_split,
    partition,
)
from .metrics import BatchComposition, LossConfig, bce_loss, combined_loss, dice_loss, dice_score, iou_score
from .pipeline import (
    RunRecord,
    TrainConfig,
    evaluate,
    mine_one_time,
    train_continuous,
    train_one_time,
    train_supervised,
)
from .prompts import ProbabilityMask, PromptSet, build_prompt_set, extract_box, extract_points
from .student import StudentConfig, build_student, load_checkpoint, save_checkpoint
from .teacher import (
    MedSamTeacher,
    OracleNoise,
    OracleTeacher,
    PseudoLabel,
    RemoteTeacher,
    SamTeacher,
    Teacher,
    TeacherRequest,
    serve_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "BatchComposition",
    "ImageSample",
    "LossConfig",
    "MedSamTeacher",
    "OracleNoise",
    "OracleTeacher",
    "ProbabilityMask",
    "PromptSet",
    "PseudoLabel",
    "RemoteTeacher",
    "RunRecord",
    "SamTeacher",
    "ShapeSpec",
    "SplitManifest",
    "StudentConfig",
    "Teacher",
    "TeacherRequest",
    "TrainConfig",
    "augment",
    "bce_loss",
    "build_prompt_set",
    "build_student",
    "combined_loss",
    "dice_loss",
    "dice_score",
    "evaluate",
    "extract_box",
    "extract_points",
    "generate_synthetic_dataset",
    "iou_score",
    "load_checkpoint",
    "load_dataset",
    "make_split",
    "mine_one_time",
    "partition",
    "save_checkpoint",
    "serve_teacher",
    "train_continuous",
    "train_one_time",
    "train_supervised",
]
