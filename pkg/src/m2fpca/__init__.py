"""Multivariate FPCA for mixed-type functional data via a Gaussian copula.

Submodules are imported lazily so that ``python -m m2fpca.cli --threads``
can cap BLAS threads before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "MixedDataset": "data_model",
    "VariableType": "data_model",
    "load_dataset": "data_model",
    "save_dataset": "data_model",
    "regular_grid": "data_model",
    "bridge_tau": "bridge",
    "bridge_inverse": "bridge",
    "BridgeTable": "bridge",
    "fit_marginals": "marginals",
    "tau_surfaces": "kendall",
    "fit_surface": "covfit",
    "assemble_and_project": "covfit",
    "LatentCorrelationModel": "covfit",
    "predict_latent": "latent",
    "predict_curves": "latent",
    "mfpca_full": "fpca",
    "ps_decompose": "fpca",
    "EigenSystem": "fpca",
    "FitSettings": "pipeline",
    "fit_m2fpca": "pipeline",
    "fit_ps_m2fpca": "pipeline",
    "SimulationConfig": "sim",
    "simulate": "sim",
    "benchmark": "sim",
}

__all__ = ["__version__", *_EXPORTS]


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
