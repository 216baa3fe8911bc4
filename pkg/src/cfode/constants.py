"""Versioned simulator constants.

The rate constants below are implementation choices (the source systems do
not publish them).  They give bounded, non-trivial trajectories over each
horizon.  Bump ``CONSTANTS_VERSION`` whenever a value changes so stored
datasets can be matched to the constants that produced them.
"""

CONSTANTS_VERSION = 1

GRAVITY = 9.81

OSCILLATOR = {
    "t_star": 5.0,
    "horizon": 15.0,
    "theta0_range": (0.5, 1.5),
    "length_range": (0.5, 4.5),
    "dose_per_amplitude": 0.5,  # A = 0.5 * theta0
    "drive_freq": 1.0,
    "drive_decay": 0.5,
    "noise_std": (0.01,),
    "obs_names": ("theta",),
    "outcome_dims": (0,),
}

CARDIO = {
    "t_star": 10.0,
    "horizon": 30.0,
    "C_a": 4.0,
    "C_v": 100.0,
    "R_TPR_min": 0.5,
    "R_TPR_max": 2.0,
    "R_TPR_mod": 0.5,
    "f_HR_min": 0.5,
    "f_HR_max": 1.5,
    "tau_baro": 5.0,
    "k_width": 0.1838,
    "P_a_set": 85.0,
    "P_a_min": 75.0,
    "P_a_width": 10.0,
    "fluid_peak": 5.0,
    "fluid_center": 5.0,
    "fluid_width": 5.0,
    # initial-state ranges (SV, P_a, P_v, S)
    "SV0_range": (20.0, 40.0),
    "P_a0_range": (60.0, 90.0),
    "P_v0_range": (5.0, 15.0),
    "S0_range": (0.3, 0.7),
    "noise_std": (1.0, 0.01),
    "obs_names": ("P_a", "f_HR"),
    "outcome_dims": (0,),
}

DEXA = {
    "t_star": 4.0,
    "horizon": 14.0,
    "k_IR": 0.4,
    "k_PF": 0.3,
    "k_O": 1.0,
    "E_max": 0.6,
    "EC50": 1.0,
    "h_P": 2.0,
    "k2": 1.0,
    "k3": 0.02,
    "k_DP": 0.6,
    "k_IIR": 0.8,
    "k_DC": 0.4,
    "h_C": 2.0,
    "k1": 0.3,
    "injection_rate": 10.0,
    "k_dex_range": (1.0, 16.0),
    "z4_0_range": (0.5, 1.5),
    "noise_std": (0.01, 0.01),
    "obs_names": ("z1", "z5"),
    "outcome_dims": (0,),
}

DATASETS = {"oscillator": OSCILLATOR, "cardio": CARDIO, "dexa": DEXA}
