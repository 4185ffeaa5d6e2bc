"""The four bias settings of the reference experiments and their observed outcomes."""

from biased_qkd.configuration import RunConfig

# Channel error rates observed in every experiment
CHANNEL_QBER_X = 0.054
CHANNEL_QBER_Z = 0.012

# Observed station biases (Z probability), Z share of matched rounds,
# sifted/raw ratio and secure bits per raw bit
experiments = [
    {"name": "exp1", "q_A": 0.4570, "q_B": 0.4752, "z_share": 0.4343, "sift_ratio": 0.516, "secure_per_raw": 0.2550},
    {"name": "exp2", "q_A": 0.5660, "q_B": 0.6074, "z_share": 0.6639, "sift_ratio": 0.529, "secure_per_raw": 0.2825},
    {"name": "exp3", "q_A": 0.7398, "q_B": 0.7606, "z_share": 0.8938, "sift_ratio": 0.635, "secure_per_raw": 0.3605},
    {"name": "exp4", "q_A": 0.8804, "q_B": 0.9062, "z_share": 0.9837, "sift_ratio": 0.813, "secure_per_raw": 0.4567},
]

# Observed secure_per_raw relative to the unbiased experiment
ratios_vs_exp1 = [1.0, 1.11, 1.41, 1.79]

# Cascade averages per frame: key length, parities revealed, errors corrected
cascade_reference = {
    "x": {"key_length": 1207.7, "qber": CHANNEL_QBER_X, "revealed": 490.8, "errors": 67.0, "f": 1.31, "k1": 16},
    "z": {"key_length": 927.2, "qber": CHANNEL_QBER_Z, "revealed": 155.8, "errors": 12.9, "f": 1.59, "k1": 72},
}


def experiment_config(experiment: dict, n_rounds: int = 1_000_000, source_seed: int = 1, **session) -> RunConfig:
    """Run configuration reproducing one experiment at ``n_rounds`` rounds."""
    return RunConfig.model_validate(
        {
            "source": {"p_bx": CHANNEL_QBER_X, "p_bz": CHANNEL_QBER_Z},
            "alice": {"q": experiment["q_A"]},
            "bob": {"q": experiment["q_B"]},
            "session": {
                "session_id": experiment["name"],
                "n_rounds": n_rounds,
                "source_seed": source_seed,
                **session,
            },
        }
    )
