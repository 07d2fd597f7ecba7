"""Two-stage transformer super-resolution for thick-slice brain MRI."""
from .estimator import SliceSuperResolver, ThickSliceSimulator
from .model import AblationFlags, ModelConfig, TransMRSRNet, get_profile, restore_volume
from .prior import CentroidBank, GanState, build_centroid_bank, truncate
from .volume import SlicePair, Volume, read_volume, write_volume

__all__ = [
    "AblationFlags", "CentroidBank", "GanState", "ModelConfig", "SlicePair", "SliceSuperResolver",
    "ThickSliceSimulator", "TransMRSRNet", "Volume", "build_centroid_bank", "get_profile",
    "read_volume", "restore_volume", "truncate", "write_volume",
]
