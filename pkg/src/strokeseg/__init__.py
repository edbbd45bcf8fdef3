"""Stroke lesion segmentation on CT from three orthogonal 2-D projections."""
from .fusion import ClassifierParams, FusionParams, classify, fuse, fuse_and_classify, v_pred
from .metrics import dsc, fisher_exact, iou, patientwise_report
from .model import ModelConfig, SegModel
from .phantom import PhantomSpec, gen_dataset, gen_phantom
from .volume import LabelVolume, Projection, VolumeGrid, read_smsk, read_svol, write_smsk, write_svol

__all__ = [
    "ClassifierParams", "FusionParams", "classify", "fuse", "fuse_and_classify", "v_pred",
    "dsc", "fisher_exact", "iou", "patientwise_report", "ModelConfig", "SegModel",
    "PhantomSpec", "gen_dataset", "gen_phantom", "LabelVolume", "Projection", "VolumeGrid",
    "read_smsk", "read_svol", "write_smsk", "write_svol",
]
__version__ = "0.1.0"
