"""Neural-symbolic question answering over a toy knowledge base with meta-learned retrieval."""

from .kb import KnowledgeBase, Environment, execute, reward
from .taskgen import CATEGORIES, Dataset, GenConfig, generate_dataset, bfs_annotate, split
from .params import ParameterVector
from .metrics import EvalReport, evaluate, compare_reports
from .meta import StageConfig
from .trainer import RunConfig, train_marl, ablate

__version__ = "0.1.0"
