from .scene import SceneModel, SceneSpec, SceneSpecError, TimelineEntry
from .dataset import Dataset, DatasetError, emit_dataset, read_flow, write_flow
from . import raytrace
