"""Template-blending reach planner for a muscle-driven planar arm."""

from .arm import ArmModel, ArmState, ExcitationProfile, MuscleParams, default_arm, simulate
from .calibration import OnlineCalibrationModel, offline_calibrate, online_fit, online_predict
from .experiment import ExperimentConfig, run_experiment
from .planner import Plan, plan
from .templates import Template, TemplateLibrary, generate_library

__all__ = [
    "ArmModel", "ArmState", "ExcitationProfile", "ExperimentConfig", "MuscleParams",
    "OnlineCalibrationModel", "Plan", "Template", "TemplateLibrary", "default_arm", "generate_library",
    "offline_calibrate", "online_fit", "online_predict", "plan", "run_experiment", "simulate",
]
