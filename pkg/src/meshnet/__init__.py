"""Face-based mesh classification network with a numpy autodiff core."""

from .geometry import FaceSet, TriMesh
from .mesh_io import DatasetRecord, load_mesh, parse_obj, parse_off, read_cache, write_cache
from .model import MeshNet, ModelConfig, ablation_configs, aggregation_configs, param_count
from .preprocess import build_face_set, decimate, normalize, prepare
from .train import TrainConfig, train
from .evaluation import EvalReport, evaluate, retrieval_map

__all__ = [
    "FaceSet", "TriMesh", "DatasetRecord", "load_mesh", "parse_obj", "parse_off", "read_cache",
    "write_cache", "MeshNet", "ModelConfig", "ablation_configs", "aggregation_configs", "param_count",
    "build_face_set", "decimate", "normalize", "prepare", "TrainConfig", "train", "EvalReport",
    "evaluate", "retrieval_map",
]
