from .armax import ArmaxModel, NonStationaryFit, fit_armax, forecast, one_step_predictions, simulate_armax
from .forest import (EmptyNode, Forest, ForestConfig, NaNInput, SingleClass, TwoStageConfig,
                     UntrainedModel, detection_probability, feature_importance, fit_forest, gini,
                     merge_runs, predict, predict_proba, two_stage_predict)
from .multitask import (DivergenceDetected, LossConfig, MultiTaskHead, ShapeMismatch, Standardizer,
                        Targets, TrainConfig, head_gradient, head_loss, multitask_loss, sgd_fit,
                        window_summary)
