"""GNSS NLOS detection and pseudorange error prediction.

Modules:
    geodesy     coordinate transforms, geometry features, LS positioning
    dataset     synthetic scenario generation, labeling, feature windows, CSV I/O
    tensor      minimal reverse-mode autodiff core
    network     the attention-enhanced LSTM and its checkpoint format
    training    Adam + multistep schedule, MSE + L1 objective
    evaluation  metrics, permutation importance, component ablation
    exclusion   positioning with and without flagged NLOS satellites
    cli         the `gnssnlos` command-line entry point
"""

__version__ = "0.1.0"
