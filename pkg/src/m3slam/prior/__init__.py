from .observation import MAX_BATCH, FrameObservation, InferenceBatch
from .scene import NoiseModel, OracleProvider, SyntheticScene, make_scene, oracle_render, sparse_scene

__all__ = [
    "MAX_BATCH",
    "FrameObservation",
    "InferenceBatch",
    "NoiseModel",
    "OracleProvider",
    "SyntheticScene",
    "make_scene",
    "oracle_render",
    "sparse_scene",
]

from .dump import DumpProvider, load_dump, save_dump, write_scene_dumps  # noqa: E402
from .intrinsics import align_intrinsics, estimate_intrinsics_ransac  # noqa: E402

__all__ += [
    "DumpProvider",
    "load_dump",
    "save_dump",
    "write_scene_dumps",
    "align_intrinsics",
    "estimate_intrinsics_ransac",
]
