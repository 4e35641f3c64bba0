"""Bird-call classification from audio recordings.

The pipeline: decode WAV recordings to normalized mono, drop silent
frames with a running-mean adaptive threshold, compute 34 short-term
acoustic features over 50 ms windows, chunk each feature sequence into
25x40 images, and classify with a distributed CNN-LSTM network trained
from scratch. See the ``birdcall`` CLI for the batch workflow.
"""

from .audio_io import (
    FrameConfig,
    FrameSeries,
    MonoSignal,
    decode_wav,
    frame_signal,
    read_mono,
    to_mono_normalized,
)
from .evaluation import (
    ClassMetrics,
    ConfusionCounts,
    MetricsReport,
    auc_roc,
    confusion_counts,
    evaluate,
    per_class_metrics,
)
from .features import (
    ALL_FEATURE_NAMES,
    FeatureConfig,
    FeatureMatrix,
    FeatureSet,
    MelFilterbank,
    Spectrum,
    build_mel_filterbank,
    extract_features,
    feature_set,
)
from .network import (
    ArchConfig,
    EpochStats,
    ModelParams,
    OptimizerState,
    SchedulerConfig,
    backward,
    cosine_annealing_lr,
    cross_entropy_loss,
    forward,
    init_params,
    load_model,
    predict_record,
    rmsprop_step,
    save_model,
    train,
)
from .vad import (
    ActivityMask,
    VadConfig,
    detect_active_frames,
    extract_active_signal,
)
from .windowing import (
    IMAGE_SHAPE,
    SEGMENT_LEN,
    Sample,
    SegmentTensor,
    build_dataset,
    record_to_tensor,
    reshape_segment,
    segment_feature,
)

__version__ = "0.1.0"
