from truecam.trust.cohort import (
    BREAKDOWN_CATEGORIES,
    PatientRecord,
    aggregate,
    breakdown,
    categorize,
    da_error_rate,
    fairness_gap,
    merged_groups,
    patient_arrays,
)
from truecam.trust.eat import (
    AmbiguityModel,
    EatFilter,
    NoAmbiguousCluster,
    ambiguity_score,
    eat_keep_mask,
    eliminate_tiles,
    fit_eat_cluster,
    fit_eat_threshold,
    fit_logistic_proxy,
    head_ambiguity_model,
    nearest_center,
)
from truecam.trust.ood import (
    DscReport,
    OodGate,
    ThresholdUnattainable,
    dsc_filter,
    gate,
    ood_score_probability,
    ood_score_uncertainty,
    tune_gate,
    tuned_threshold,
)
