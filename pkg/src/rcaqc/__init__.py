"""Segmentation quality control via reverse classification accuracy (RCA).

Predicts per-structure segmentation quality without ground truth by training
a reverse classifier on the predicted segmentation and scoring it on a
reference database of images with trusted labels.
"""

from .metrics import MetricReport, QualityCategory, categorize, evaluate_all
from .quantify import AccuracyReport, PredictionRecord, calibrate_loso
from .rca import RcaPrediction, proxy_aggregate, rca_predict, train_reverse_classifier
from .volume import LabelVolume, ReferenceDatabase, Volume, load_volume, save_volume

__all__ = [
    "AccuracyReport",
    "LabelVolume",
    "MetricReport",
    "PredictionRecord",
    "QualityCategory",
    "RcaPrediction",
    "ReferenceDatabase",
    "Volume",
    "calibrate_loso",
    "categorize",
    "evaluate_all",
    "load_volume",
    "proxy_aggregate",
    "rca_predict",
    "save_volume",
    "train_reverse_classifier",
]

__version__ = "0.1.0"
