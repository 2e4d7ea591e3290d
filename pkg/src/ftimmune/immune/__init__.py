"""Immune defense: bound, generator, negative selection, edge verdicts, pipeline."""

from .bound import BoundError, GammaBound, gamma_bound, violation_rate
from .detectors import (DetectorError, DetectorFormatError, DetectorSet, calibrate_rho, calibrate_rho_feasible,
                        detect_abnormal, detect_many, export_detectors, import_detectors, produce_detectors, screen,
                        unique_trajectories)
from .edges import (EdgeVerdict, RectifyError, classify_deleted, classify_inserted, deletion_candidates,
                    rectify)
from .generator import (FeasibilityError, Generator, GeneratorConfig, GeneratorError, generate_chains,
                        generate_feasible_fts, train_generator)
from .pipeline import ExogenousSource, ImmuneConfig, PipelineResult, defense_scores, run_pipeline
