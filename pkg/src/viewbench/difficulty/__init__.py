from .annotate import DifficultyAnnotation, annotate_object
from .saturation import (DEFAULT_SCHEDULE, CoverageCache, SaturationCurve, build_coverage_matrix,
                         detect_saturation, saturation_curve, self_occlusion_ratio)
from .setcover import CoverageMatrix, SetCoverSolution, solve_set_cover
from .splits import balanced_train_sample, stratified_test_split

__all__ = ["DEFAULT_SCHEDULE", "CoverageCache", "CoverageMatrix", "DifficultyAnnotation", "SaturationCurve",
           "SetCoverSolution", "annotate_object", "balanced_train_sample", "build_coverage_matrix",
           "detect_saturation", "saturation_curve", "self_occlusion_ratio", "solve_set_cover",
           "stratified_test_split"]
