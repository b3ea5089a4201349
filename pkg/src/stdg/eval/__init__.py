from .metrics import EvalTask, ImageResult, TASKS, ap50, iou, match_triplets, mean_recall, recall_at_k, zero_shot_recall
from .report import DecodeOptions, EvalItem, EvalReport, KS, evaluate, predict, run_eval, table1_csv, table1_row, table5_csv, table5_text

__all__ = [
    "EvalTask", "ImageResult", "TASKS", "ap50", "iou", "match_triplets", "mean_recall", "recall_at_k", "zero_shot_recall",
    "DecodeOptions", "EvalItem", "EvalReport", "KS", "evaluate", "predict", "run_eval", "table1_csv", "table1_row", "table5_csv", "table5_text",
]
