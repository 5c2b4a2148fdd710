"""Posterior inference for the sparse factor model."""

from inference.cavi import (
    CaviResult,
    MultiTrialResult,
    VariationalState,
    compute_elbo,
    elbo_terms,
    load_variational_state,
    random_state,
    run_cavi,
    run_multi_trial,
    save_variational_state,
    update_alpha,
    update_f,
    update_lz,
    update_tau,
)
from inference.chain import SampleChain, load_chain, save_chain
from inference.gibbs import (
    alpha_conditional,
    f_col_conditional,
    l_row_conditional,
    run_chain,
    run_chains,
    sample_alpha,
    sample_f_cols,
    sample_l_rows,
    sample_tau,
    sample_z,
    sample_z_entry,
    sweep,
    tau_conditional,
    z_entry_log_odds,
)
from inference.relabel import (
    Action,
    Relabelling,
    RelabelResult,
    apply_relabelling,
    assign_sample,
    loss,
    relabel_chains,
    update_action,
)

__all__ = [
    "Action",
    "CaviResult",
    "MultiTrialResult",
    "RelabelResult",
    "Relabelling",
    "SampleChain",
    "VariationalState",
    "alpha_conditional",
    "apply_relabelling",
    "assign_sample",
    "compute_elbo",
    "elbo_terms",
    "f_col_conditional",
    "l_row_conditional",
    "load_chain",
    "load_variational_state",
    "loss",
    "random_state",
    "relabel_chains",
    "run_cavi",
    "run_chain",
    "run_chains",
    "run_multi_trial",
    "sample_alpha",
    "sample_f_cols",
    "sample_l_rows",
    "sample_tau",
    "sample_z",
    "sample_z_entry",
    "save_chain",
    "save_variational_state",
    "sweep",
    "tau_conditional",
    "update_action",
    "update_alpha",
    "update_f",
    "update_lz",
    "update_tau",
    "z_entry_log_odds",
]
