from .checkpoint import Checkpoint, CheckpointError, checkpoint_bytes, checkpoint_load, checkpoint_save, parse_checkpoint
from .cls_train import ClsData, cls_train_step, evaluate_classifier, train_classification
from .metrics_log import MetricsCSV, header_for, read_metrics
from .models import BACKBONES, ClassifierModel, ModelSpec, SegmenterModel, build_model
from .plan import ClsPlan, SegPlan, TrainPlan, plan_hash
from .schedules import lr_at_epoch_cls, lr_at_iter_seg
from .seg_train import SegData, evaluate_segmenter, seg_train_step, train_segmentation
