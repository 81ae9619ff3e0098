from truecam.sngp_head._optim import TrainConfig, TrainingDiverged
from truecam.sngp_head.abmil import Abmil, AbmilConfig, abmil_pool, abmil_predict
from truecam.sngp_head.checkpoint import CheckpointError, dumps_head, load_head, loads_head, save_head
from truecam.sngp_head.dropout import DropoutMlp, dropout_uncertainty, fit_dropout_head, mc_dropout_predict
from truecam.sngp_head.sngp import (
    GpPosterior,
    PredictiveOutput,
    RffProjection,
    SngpHead,
    SnMlp,
    SnMlpConfig,
    apply_spectral_normalization,
    fit_head,
    forward_features,
    gp_uncertainty,
    loss_and_grads,
    predict,
    predictive_probs,
    rbf_kernel,
    rff_transform,
)
