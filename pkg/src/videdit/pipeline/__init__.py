"""Data construction: clip pre-processing, per-category pair builders and stage orchestration."""
from .builders import (
    SHOT_TYPES,
    ConstructionError,
    ShotSegment,
    build_camera_pairs,
    build_creative_pairs,
    build_local_add_pair,
    build_local_remove_pair,
    frame_differences,
    label_shots,
    segment_shots,
)
from .jobs import (
    CHAINS,
    DONE,
    FAILED,
    PENDING,
    STAGE1_CHAIN,
    PipelineConfig,
    StageJob,
    StepSpec,
    run_stage,
    stage1_job,
    stage2_job,
)
from .local_ops import (
    MaskSet,
    TooShortError,
    canny_edges,
    composite_masked,
    detect_foreground,
    dilate_video,
    extract_window,
    mask_background_of,
    mask_iou,
    sample_clip_window,
    select_foreground_subset,
)
from .runner import FILTER_EXEMPT, PipelineResult, judge_pairs, manifest_records, run_pipeline, write_outputs
from .subtitles import (
    POSITIONS,
    STYLES,
    TASKS,
    LayoutError,
    SubtitleStyle,
    band_rows,
    build_subtitle_triplet,
    render_subtitle,
    subtitle_mask,
    text_raster,
)
from .synthetic import synthetic_video
