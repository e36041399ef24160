"""Post-processing (threshold, Soft-NMS, top-k) and temporal localization metrics."""
from .inference import detect, evaluate_model, predict_dataset
from .metrics import EvalConfig, MapReport, average_precision, evaluate_map, evaluate_recall, interpolated_ap
from .postprocess import (
    Detection,
    filter_topk,
    read_detections,
    soft_nms,
    soft_nms_arrays,
    tiou,
    write_detections,
)
