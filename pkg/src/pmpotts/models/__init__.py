"""Node-model families: the Gaussian toy model and PET compartmental models."""

from .base import KernelData, NodeModelFamily
from .pet import (CompartmentParams, FrameSchedule, PetFamily, PetPrior, PlasmaInput, bolus_input,
                  default_schedule, tissue_concentration, volume_of_distribution)
from .toy import ToyFamily, ToyModelParams

__all__ = [
    "KernelData", "NodeModelFamily", "CompartmentParams", "FrameSchedule", "PetFamily", "PetPrior",
    "PlasmaInput", "bolus_input", "default_schedule", "tissue_concentration",
    "volume_of_distribution", "ToyFamily", "ToyModelParams",
]
