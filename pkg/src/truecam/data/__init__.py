from truecam.data.io import (
    MANIFEST_COLUMNS,
    OOD_LABEL,
    FormatError,
    Manifest,
    dumps_embeddings,
    loads_embeddings,
    read_embeddings,
    read_manifest,
    write_embeddings,
    write_manifest,
)
from truecam.data.scenarios import (
    Scenario,
    ScenarioConfig,
    gen_eat_scenario,
    gen_ind_scenario,
    gen_ood_scenario,
    read_scenario_config,
    write_scenario_config,
)
from truecam.data.splits import ModelSplit, SplitPlan, make_split_plan, partition_sizes, resplit_indices
