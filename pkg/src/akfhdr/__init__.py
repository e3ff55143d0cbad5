"""HDR video reconstruction from events and frames with an asynchronous Kalman filter."""
from .augment import AugmentedFrame, AugmentParams, EventIndex, augment_sequence, edi_deblur
from .events import Event, EventArray, EventNoiseParams, StreamOrderError, event_covariances
from .filter import FilterConfig, PixelFilterState, Reconstruction, decay_state, reconstruct
from .frames import CrfFitError, CrfTable, FrameNoiseParams, FrameObservation, fit_crf, to_log_frame
from .metrics import MetricReport, mse, ssim

__version__ = "0.1.0"

__all__ = [
    "AugmentParams", "AugmentedFrame", "CrfFitError", "CrfTable", "Event", "EventArray",
    "EventIndex", "EventNoiseParams", "FilterConfig", "FrameNoiseParams", "FrameObservation",
    "MetricReport", "PixelFilterState", "Reconstruction", "StreamOrderError", "augment_sequence",
    "decay_state", "edi_deblur", "event_covariances", "fit_crf", "mse", "reconstruct", "ssim",
    "to_log_frame",
]
