from .cub import ingest_cub
from .finegrained import SyntheticFinegrainedSpec, gen_finegrained, load_split
from .io import SCHEMA, ImageStore
from .scenes import SearchScene, SearchSceneSpec, gen_search_scenes, load_protocol, load_scenes

__all__ = [
    "SCHEMA", "ImageStore", "SearchScene", "SearchSceneSpec", "SyntheticFinegrainedSpec",
    "gen_finegrained", "gen_search_scenes", "ingest_cub", "load_protocol", "load_scenes",
    "load_split",
]
