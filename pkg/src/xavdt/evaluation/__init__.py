"""Metrics, separability, attention analyses, attribution and human-study aggregation."""
from .attention_maps import attention_energy, delta_attention_map, minmax, temporal_attention_heatmap, topq_roi_coverage
from .gradcam import cam_from, grad_cam
from .heatmap_io import save_heatmap
from .human import HFARResult, hfar
from .metrics import EvalReport, MetricError, accuracy, average_precision, eer_and_acc, evaluate, roc_auc
from .separability import SNR_FLOOR_DB, SeparabilityReport, embedding_snr, fisher_snr, lda_fit_and_margin
