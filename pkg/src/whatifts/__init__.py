"""Counterfactual time series forecasting with textual conditions.

A text-conditioned diffusion forecaster with two-stage what-if inference
(history attribution, then anchored denoising under a hypothetical
condition), a dual-encoder consistency metric for judging counterfactual
forecasts, and a synthetic benchmark generator with attribute-derived
captions.
"""

from .checkpoint import ForecasterBundle, checkpoint_id
from .counterfactual import CfConfig, construct_counterfactual, counterfactual_loss, finetune
from .data_model import (
    Dataset,
    Normalizer,
    SampleTuple,
    apply_normalizer,
    fit_normalizer,
    load_dataset,
    save_dataset,
)
from .dttc import (
    DttcBundle,
    DttcConfig,
    DttcModel,
    DttcTrainConfig,
    contrastive_losses,
    dttc_scores,
    independence_probe,
    retrieval_eval,
    train_dttc,
)
from .errors import CheckpointError, DataError, GridViolationError, SchemaError
from .estimator import EstimatorConfig, NoiseEstimator
from .evaluation import evaluate, export_initial_noise, mae_mse, persistence_forecast
from .inference import ForecastRequest, ForecastResult, attribute, forecast, forecast_batch
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step, make_schedule, q_sample, x0_estimate
from .synthgen import AttributePair, AttributeSet, generate_dataset, parse_caption, render_caption, render_series, sample_attributes
from .textproc import TextEncoder, Vocab, build_vocab, tokenize
from .training import TrainConfig, attribution_loss, forecast_loss, make_masked_batch, train

__version__ = "0.1.0"
